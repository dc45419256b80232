"""Box algebra and detection bookkeeping.

Boxes are ``(x1, y1, x2, y2)`` in image pixels with ``x`` the row axis, the
same convention as :mod:`aligndet.ops`. Scalar helpers take :class:`Box` (or
any 4-sequence); the ``*_matrix``/``*_boxes`` variants work on ``(N, 4)``
arrays and are what the detector uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "AnchorGrid",
    "LabelAssignment",
    "NEGATIVE",
    "IGNORE",
    "iou",
    "iou_matrix",
    "make_anchor_grid",
    "encode",
    "decode",
    "encode_boxes",
    "decode_boxes",
    "assign_labels",
    "nms",
    "nms_indices",
    "batched_nms",
    "decode_offsets_to_roi",
    "alignment_histogram",
    "histogram_csv",
]

NEGATIVE = -1
IGNORE = -2

# keeps exp() of size deltas finite, as in common R-CNN code
_MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box has negative extent: {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def height(self) -> float:
        return self.x2 - self.x1

    @property
    def width(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.height * self.width

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def to_list(self) -> list[float]:
        return [float(v) for v in self]

    @classmethod
    def from_seq(cls, seq) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in list(seq)[:4])
        return cls(x1, y1, x2, y2)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ih = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iw = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ih * iw
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` box arrays: ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ih = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iw = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ih * iw
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


# -- anchors ---------------------------------------------------------------

@dataclass(frozen=True)
class AnchorGrid:
    H: int
    W: int
    stride: float
    scale: float
    ratio: float
    boxes: np.ndarray  # (H, W, 4)

    def flat(self) -> np.ndarray:
        return self.boxes.reshape(-1, 4)

    def __getitem__(self, loc) -> Box:
        return Box.from_seq(self.boxes[loc])


def make_anchor_grid(H: int, W: int, stride: float, scale: float,
                     ratio: float = 1.0) -> AnchorGrid:
    """One anchor per location, centred on the cell, area ``(scale * stride)**2``.

    ``ratio`` is row extent over column extent.
    """
    if min(H, W) < 1 or min(stride, scale, ratio) <= 0:
        raise ValueError("anchor grid parameters must be positive")
    side = scale * stride
    ex = side * math.sqrt(ratio)
    ey = side / math.sqrt(ratio)
    cx = (np.arange(H) + 0.5) * stride
    cy = (np.arange(W) + 0.5) * stride
    boxes = np.empty((H, W, 4))
    boxes[..., 0] = cx[:, None] - ex / 2
    boxes[..., 1] = cy[None, :] - ey / 2
    boxes[..., 2] = cx[:, None] + ex / 2
    boxes[..., 3] = cy[None, :] + ey / 2
    return AnchorGrid(H, W, stride, scale, ratio, boxes)


# -- box deltas ------------------------------------------------------------

def encode_boxes(anchors, gts) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    ea = anchors[:, 2:] - anchors[:, :2]
    eg = gts[:, 2:] - gts[:, :2]
    if np.any(ea <= 0):
        raise ValueError("anchor must have positive extent")
    if np.any(eg <= 0):
        raise ValueError("gt must have positive extent")
    ca = anchors[:, :2] + 0.5 * ea
    cg = gts[:, :2] + 0.5 * eg
    return np.concatenate([(cg - ca) / ea, np.log(eg / ea)], axis=1)


def decode_boxes(anchors, deltas, image_size=None, min_size: float = 1.0) -> np.ndarray:
    """Inverse of :func:`encode_boxes`, optionally clamped.

    With ``image_size`` the result is clipped into ``[0, image_size]`` and
    every box keeps an extent of at least ``min_size``.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ea = anchors[:, 2:] - anchors[:, :2]
    ca = anchors[:, :2] + 0.5 * ea
    c = ca + deltas[:, :2] * ea
    e = ea * np.exp(np.minimum(deltas[:, 2:], _MAX_LOG_RATIO))
    out = np.concatenate([c - 0.5 * e, c + 0.5 * e], axis=1)
    if image_size is not None:
        size = np.broadcast_to(np.asarray(image_size, dtype=np.float64), (2,))
        lo = np.clip(out[:, :2], 0, size - min_size)
        hi = np.clip(out[:, 2:], lo + min_size, size)
        out = np.concatenate([lo, hi], axis=1)
    return out


def encode(anchor, gt) -> np.ndarray:
    return encode_boxes([tuple(anchor)], [tuple(gt)])[0]


def decode(anchor, delta, image_size=None, min_size: float = 1.0) -> Box:
    return Box.from_seq(decode_boxes([tuple(anchor)], [delta], image_size, min_size)[0])


# -- label assignment ------------------------------------------------------

@dataclass
class LabelAssignment:
    """Per-anchor labels: a gt index for positives, else ``NEGATIVE``/``IGNORE``."""

    labels: np.ndarray
    max_iou: np.ndarray
    forced: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    def targets(self, anchors, gts) -> np.ndarray:
        """Regression deltas for positives; zero rows elsewhere."""
        anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
        out = np.zeros((len(anchors), 4))
        pos = self.positive
        if pos.any():
            out[pos] = encode_boxes(anchors[pos], np.asarray(gts)[self.labels[pos], :4])
        return out


def assign_labels(anchors, gts, fg_thr: float, bg_thr: float,
                  force_match: bool = True) -> LabelAssignment:
    """Max-IoU matching with an ignore band ``[bg_thr, fg_thr)``.

    Every gt additionally claims its best anchor (lowest index on ties) when
    that IoU is positive, so small objects always get a positive.
    """
    if fg_thr < bg_thr:
        raise ValueError("fg_thr must be >= bg_thr")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, np.shape(gts)[-1] if len(gts) else 4)
    forced = np.zeros(n, dtype=bool)
    if len(gts) == 0:
        return LabelAssignment(np.full(n, NEGATIVE), np.zeros(n), forced)
    ious = iou_matrix(anchors, gts[:, :4])
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels = np.where(max_iou >= fg_thr, best_gt,
                      np.where(max_iou < bg_thr, NEGATIVE, IGNORE))
    if force_match:
        claim = np.full(n, -1.0)
        for g in range(len(gts)):
            a = int(ious[:, g].argmax())
            if ious[a, g] > 0 and ious[a, g] > claim[a]:
                claim[a] = ious[a, g]
                labels[a] = g
                forced[a] = True
    return LabelAssignment(labels.astype(np.int64), max_iou, forced)


# -- NMS -------------------------------------------------------------------

def nms_indices(boxes, scores, iou_thr: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores keep the lower original index first. A box is suppressed when
    its IoU with a kept box exceeds ``iou_thr``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_thr]
    return np.asarray(keep, dtype=np.int64)


def nms(detections, iou_thr: float):
    """NMS over a list of ``(box, score)`` pairs; returns the kept pairs."""
    if not detections:
        return []
    boxes = [tuple(b) for b, _ in detections]
    keep = nms_indices(boxes, [s for _, s in detections], iou_thr)
    return [detections[i] for i in keep]


def batched_nms(boxes, scores, classes, iou_thr: float) -> np.ndarray:
    """NMS run independently per class label; kept indices by descending score."""
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.extend(idx[nms_indices(boxes[idx], scores[idx], iou_thr)])
    keep = np.asarray(keep, dtype=np.int64)
    return keep[np.argsort(-scores[keep], kind="stable")] if keep.size else keep


# -- alignment analysis ----------------------------------------------------

def decode_offsets_to_roi(offsets, kernel, X: int, Y: int, stride: float) -> Box:
    """Image-space box spanned by displaced taps at one output location.

    ``offsets`` is the ``2 * h * w`` vector at ``(X, Y)`` in the layout of
    :class:`aligndet.ops.OffsetField`. The circumscribed rectangle of the
    sample points is grown by half the mean tap spacing on each side, so zero
    offsets give back the implicit RoI and RoIConv offsets give back their
    anchor.
    """
    h, w = (kernel.kernel_h, kernel.kernel_w) if hasattr(kernel, "kernel_h") else kernel
    off = np.asarray(offsets, dtype=np.float64).reshape(h, w, 2)
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    px = X - h // 2 + i + 0.5 + off[..., 0]
    py = Y - w // 2 + j + 0.5 + off[..., 1]

    def span(p, k):
        lo, hi = p.min(), p.max()
        gap = (hi - lo) / (k - 1) if k > 1 else 1.0
        return lo - gap / 2, hi + gap / 2

    x1, x2 = span(px, h)
    y1, y2 = span(py, w)
    return Box(x1 * stride, y1 * stride, x2 * stride, y2 * stride)


def alignment_histogram(implicit_rois, anchors, bin_width: float = 0.05):
    """Histogram of paired IoUs over ``[0, 1]``; the last bin is right-closed.

    Returns ``(edges, counts)``.
    """
    if not 0 < bin_width <= 1:
        raise ValueError("bin_width must lie in (0, 1]")
    a = np.asarray([tuple(b) for b in implicit_rois], dtype=np.float64).reshape(-1, 4)
    b = np.asarray([tuple(x) for x in anchors], dtype=np.float64).reshape(-1, 4)
    if len(a) != len(b):
        raise ValueError("implicit_rois and anchors must pair up")
    n = round(1 / bin_width)
    if abs(n * bin_width - 1) > 1e-9:
        n = math.ceil(1 / bin_width)
    edges = np.minimum(np.arange(n + 1) * bin_width, 1.0)
    edges[-1] = 1.0
    vals = np.array([iou(p, q) for p, q in zip(a, b)])
    counts, _ = np.histogram(np.clip(vals, 0, 1), bins=edges)
    return edges, counts


def histogram_csv(edges, counts) -> str:
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{lo:.4f},{hi:.4f},{int(c)}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return "\n".join(lines) + "\n"
