"""Implicit-RoI geometry across strides and the anchor misalignment it implies."""

from __future__ import annotations

from .boxes import iou, make_anchor_grid
from .ops import implicit_roi


def implicit_roi_sizes(strides, kernels) -> list[dict]:
    """Image-space extent of the implicit RoI for every (stride, kernel) pair."""
    rows = []
    for s in strides:
        for k in kernels:
            h, w = (k, k) if isinstance(k, int) else k
            b = implicit_roi(0, 0, (h, w), s)
            rows.append({"stride": s, "kernel": f"{h}x{w}", "rows": b.height, "cols": b.width})
    return rows


def misalignment_table(strides, kernel=3, anchor_scale: float = 4.0,
                       ratios=(0.5, 1.0, 2.0)) -> list[dict]:
    """IoU between the conv's implicit RoI and the anchor at the same location.

    Anchors and implicit RoIs share their centre, so the IoU only depends on
    the two shapes, not on the location.
    """
    rows = []
    for s in strides:
        roi = implicit_roi(1, 1, (kernel, kernel), s)
        for r in ratios:
            anchor = make_anchor_grid(3, 3, s, anchor_scale, r)[1, 1]
            rows.append({"stride": s, "anchor_rows": anchor.height, "anchor_cols": anchor.width,
                         "implicit_side": roi.height, "ratio": r, "iou": iou(roi, anchor)})
    return rows
