"""Synthetic scenes: filled rectangles on a noisy canvas, classed by aspect ratio."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .boxes import iou_matrix
from .tensor import Rng

CLASSES = ("tall", "square", "wide")
MIN_EXTENT = 8
MAX_EXTENT = 48
MAX_GT_IOU = 0.3
_MAX_TRIES = 50


def aspect_class(height: float, width: float) -> int:
    """0 tall (rows/cols > 1.5), 2 wide (< 1/1.5), 1 square otherwise."""
    r = height / width
    if r > 1.5:
        return 0
    if r < 1 / 1.5:
        return 2
    return 1


@dataclass
class SyntheticScene:
    image: np.ndarray  # (1, H, W)
    boxes: np.ndarray  # (n, 4)
    classes: np.ndarray  # (n,)

    @property
    def gts(self) -> np.ndarray:
        """``(n, 5)`` rows of box plus class."""
        return np.concatenate([self.boxes, self.classes[:, None].astype(np.float64)], axis=1)

    def to_json(self) -> str:
        return json.dumps({
            "boxes": self.boxes.tolist(),
            "classes": self.classes.tolist(),
            "image_sum": float(self.image.sum()),
        })


def generate_scene(rng: Rng, image_size: int = 64, noise: float = 0.1) -> SyntheticScene:
    n_target = rng.integers(1, 4)
    boxes = []
    for _ in range(n_target):
        for _ in range(_MAX_TRIES):
            eh = rng.integers(MIN_EXTENT, MAX_EXTENT + 1)
            ew = rng.integers(MIN_EXTENT, MAX_EXTENT + 1)
            x1 = rng.integers(0, image_size - eh + 1)
            y1 = rng.integers(0, image_size - ew + 1)
            cand = np.array([x1, y1, x1 + eh, y1 + ew], dtype=np.float64)
            if not boxes or iou_matrix(cand, np.array(boxes)).max() <= MAX_GT_IOU:
                boxes.append(cand)
                break
    boxes = np.array(boxes).reshape(-1, 4)
    classes = np.array([aspect_class(b[2] - b[0], b[3] - b[1]) for b in boxes], dtype=np.int64)

    image = rng.normal(0.0, noise, size=(1, image_size, image_size))
    for b in boxes:
        x1, y1, x2, y2 = b.astype(int)
        image[0, x1:x2, y1:y2] = rng.uniform(0.5, 1.0)
    return SyntheticScene(image, boxes, classes)


def generate_dataset(seed: int, n: int, image_size: int = 64) -> list[SyntheticScene]:
    rng = Rng(seed)
    return [generate_scene(rng, image_size) for _ in range(n)]
