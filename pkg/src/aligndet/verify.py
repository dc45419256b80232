"""Randomised checks that convolution is fully connected RoIAlign over its implicit RoI.

Every check draws its problem from a seeded :class:`~aligndet.tensor.Rng` and
reports a maximum error, so a report can be regenerated exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .ops import (ConvSpec, FeatureMap, col2im, conv_forward, deform_conv_forward,
                  deform_sampling_points, im2col, implicit_roi, roialign, roialign_points,
                  roiconv_offsets)
from .tensor import Rng

KERNEL_SIDES = (1, 2, 3, 4, 5, 7)
STRIDES = (1, 2, 4, 8, 16, 32)


def _random_problem(rng: Rng, dtype=np.float64):
    h, w = (KERNEL_SIDES[int(rng.integers(0, len(KERNEL_SIDES)))] for _ in range(2))
    stride = float(STRIDES[int(rng.integers(0, len(STRIDES)))])
    C, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    H = int(rng.integers(max(1, h // 2), 11))
    W = int(rng.integers(max(1, w // 2), 11))
    spec = ConvSpec.random(rng, C, cout, h, w)
    spec = ConvSpec.from_weights(spec.weights.astype(dtype), spec.bias.astype(dtype), (h, w))
    x = rng.normal(size=(C, H, W)).astype(dtype)
    return spec, FeatureMap(x, stride)


def _describe(spec: ConvSpec, f: FeatureMap) -> dict:
    C, H, W = f.tensor.shape
    return {"kernel": [spec.kernel_h, spec.kernel_w], "in_channels": C,
            "out_channels": spec.out_channels, "H": H, "W": W, "stride": f.stride}


def implicit_anchor_field(H: int, W: int, kernel, stride: float) -> np.ndarray:
    """``(H, W, 4)`` implicit RoIs of every output location."""
    return np.array([[tuple(implicit_roi(X, Y, kernel, stride)) for Y in range(W)]
                     for X in range(H)], dtype=np.float64).reshape(H, W, 4)


def equivalence_case(rng: Rng, dtype=np.float64) -> dict:
    """Conv output against the FC layer applied to RoIAlign of the implicit RoI."""
    spec, f = _random_problem(rng, dtype)
    out = conv_forward(f, spec)
    _, H, W = f.tensor.shape
    err = 0.0
    for X in range(H):
        for Y in range(W):
            roi = implicit_roi(X, Y, spec, f.stride)
            v = spec.weights @ roialign(f, roi, spec.kernel_h, spec.kernel_w).reshape(-1)
            err = max(err, float(np.max(np.abs(v + spec.bias - out[:, X, Y]))))
    return {**_describe(spec, f), "max_abs_error": err}


def identity_case(rng: Rng, dtype=np.float64) -> dict:
    """Deformable conv with offsets generated for the implicit RoIs against conv."""
    spec, f = _random_problem(rng, dtype)
    _, H, W = f.tensor.shape
    off = roiconv_offsets(implicit_anchor_field(H, W, spec, f.stride), spec, f.stride)
    err = float(np.max(np.abs(deform_conv_forward(f, spec, off) - conv_forward(f, spec))))
    return {**_describe(spec, f), "max_abs_error": err}


def adjoint_case(rng: Rng) -> dict:
    """``<im2col(x), y> == <x, col2im(y)>`` relative to the term magnitudes."""
    spec, f = _random_problem(rng)
    x = f.tensor
    cols = im2col(x, spec)
    y = rng.normal(size=cols.shape)
    lhs = math.fsum((cols * y).ravel())
    rhs = math.fsum((x * col2im(y, x.shape, spec)).ravel())
    scale = math.fsum(np.abs(cols * y).ravel()) or 1.0
    return {**_describe(spec, f), "max_abs_error": abs(lhs - rhs) / scale}


def anchor_sampling_error(rng: Rng, n_boxes: int = 1000) -> float:
    """Offsets for arbitrary anchors against their RoIAlign sample coordinates."""
    worst = 0.0
    for _ in range(n_boxes):
        h, w = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        S = float(STRIDES[int(rng.integers(0, len(STRIDES)))])
        H, W = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        X, Y = int(rng.integers(0, H)), int(rng.integers(0, W))
        x1, y1 = rng.uniform(-4 * S, (H + 4) * S, size=2)
        ex, ey = rng.uniform(0, 8 * S, size=2)
        anchors = np.zeros((H, W, 4))
        anchors[..., 2:] = 1.0
        anchors[X, Y] = (x1, y1, x1 + ex, y1 + ey)
        xs, ys = deform_sampling_points((h, w), roiconv_offsets(anchors, (h, w), S))
        rx, ry = roialign_points(anchors[X, Y], h, w, S)
        worst = max(worst,
                    float(np.max(np.abs(xs[:, X, Y].reshape(h, w) - rx[:, None]))),
                    float(np.max(np.abs(ys[:, X, Y].reshape(h, w) - ry[None, :]))))
    return worst


def hand_offsets() -> list:
    """Row offsets of the centre column at X=1 for a stride-16 3x3 kernel, anchor rows 0..96."""
    anchors = np.zeros((2, 1, 4))
    anchors[:, 0] = (0.0, 0.0, 48.0, 48.0)
    anchors[1, 0] = (0.0, 0.0, 96.0, 48.0)
    off = roiconv_offsets(anchors, (3, 3), 16)
    return off.dx[1::3, 1, 0].tolist()


def run_verify(seed: int = 0, cases: int = 100, tol: float = 1e-10,
               identity_tol: float = 1e-12, boxes: int = 1000, box_tol: float = 1e-9,
               adjoint_cases: int = 20, adjoint_tol: float = 1e-12,
               dtype=np.float64) -> dict:
    """Run the full suite; ``report["ok"]`` is True iff every check is within tolerance."""
    rng = Rng(seed)
    eq = [equivalence_case(rng.spawn(k), dtype) for k in range(cases)]
    ident = [identity_case(rng.spawn(10_000 + k), dtype) for k in range(cases)]
    adj = [adjoint_case(rng.spawn(20_000 + k)) for k in range(adjoint_cases)]
    box_err = anchor_sampling_error(rng.spawn(30_000), boxes)
    hand = hand_offsets()
    sections = {
        "equivalence": {"tolerance": tol, "cases": eq},
        "roiconv_identity": {"tolerance": identity_tol, "cases": ident},
        "adjoint": {"tolerance": adjoint_tol, "cases": adj},
        "anchor_sampling": {"tolerance": box_tol, "boxes": boxes, "max_abs_error": box_err},
        "hand_offsets": {"tolerance": 0.0, "expected": [0.5, 1.5, 2.5], "got": hand,
                         "max_abs_error": max(abs(a - b) for a, b in zip(hand, [0.5, 1.5, 2.5]))},
    }
    ok = True
    for sec in sections.values():
        errs = [c["max_abs_error"] for c in sec["cases"]] if "cases" in sec \
            else [sec["max_abs_error"]]
        sec["max_abs_error"] = max(errs)
        sec["ok"] = all(e <= sec["tolerance"] for e in errs)
        ok &= sec["ok"]
    return {"seed": seed, "ok": bool(ok), "sections": sections}
