"""Detector configuration with strict JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

VARIANTS = ("vanilla_conv", "learned_deform", "roiconv")


class ConfigError(ValueError):
    pass


@dataclass
class DetectionConfig:
    # scene and anchors
    image_size: int = 64
    stride: int = 8
    anchor_scale: float = 4.0
    anchor_ratio: float = 1.0
    num_classes: int = 3
    # label assignment, fg / bg IoU per head
    dpm_fg: float = 0.4
    dpm_bg: float = 0.3
    adm_fg: float = 0.6
    adm_bg: float = 0.6
    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 1.0
    smooth_l1_beta: float = 1.0 / 9
    # inference
    nms_iou: float = 0.5
    score_thresh: float = 0.05
    max_detections: int = 100
    # model
    adm_kernel: int = 3
    variant: str = "roiconv"
    backbone_channels: list = field(default_factory=lambda: [16, 32, 32])
    head_channels: int = 32
    adm_channels: int = 64
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    grad_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for head in ("dpm", "adm"):
            fg, bg = getattr(self, f"{head}_fg"), getattr(self, f"{head}_bg")
            if not 0 <= bg <= fg <= 1:
                raise ConfigError(f"{head} thresholds need 0 <= bg <= fg <= 1, got {fg}/{bg}")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.image_size % self.stride:
            raise ConfigError("image_size must be a multiple of stride")
        if self.stride != 2 ** len(self.backbone_channels):
            raise ConfigError("stride must equal 2 ** number of backbone convs")
        if self.adm_kernel < 1 or self.batch_size < 1:
            raise ConfigError("adm_kernel and batch_size must be positive")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0 and momentum in [0, 1)")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def replace(self, **changes) -> "DetectionConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
