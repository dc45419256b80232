"""Convolution as RoIAlign, RoIConv and a desk-scale AlignDet detector."""

from .boxes import Box
from .ops import ConvSpec, FeatureMap, OffsetField
from .tensor import Rng

__version__ = "0.1.0"

__all__ = ["Box", "ConvSpec", "FeatureMap", "OffsetField", "Rng"]
