"""Central finite-difference checks for every hand-written backward pass.

Each registered check builds a small double-precision problem from a seed,
computes the analytic gradient and compares it with central differences of a
scalar objective ``sum(output * upstream)``. The error for one entry is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor keeps
structurally-zero entries (dead ReLUs, untouched cells) from dividing noise
by noise and is far below any gradient magnitude that occurs.
"""

from __future__ import annotations

import math

import numpy as np

from .config import DetectionConfig
from .losses import focal_loss, focal_terms, smooth_l1
from .model import init_model, loss_and_grads
from .ops import (ConvSpec, OffsetField, bilinear_grads, bilinear_sample, conv_backward,
                  conv_forward, deform_conv_backward, deform_conv_forward)
from .scenes import generate_dataset
from .tensor import Rng

EPS = 1e-5
FLOOR = 1e-6
OPERATOR_TOL = 1e-6
END_TO_END_TOL = 1e-5


def numerical_gradient(fn, x: np.ndarray, eps: float = EPS, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def dot(a, b) -> float:
    """Exactly rounded ``sum(a * b)``; terms that did not move cancel exactly."""
    return math.fsum((np.asarray(a) * np.asarray(b)).ravel())


def max_rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def _off_grid(rng, shape, lo=-1.5, hi=1.5, margin=0.05):
    """Offsets whose fractional part stays ``margin`` away from cell-centre lines."""
    whole = rng.integers(int(np.floor(lo)), int(np.ceil(hi)), size=shape).astype(np.float64)
    return whole + rng.uniform(margin, 1 - margin, size=shape)


def check_conv(seed: int = 0, corrupt: bool = False) -> float:
    rng = Rng(seed)
    spec = ConvSpec.random(rng, 1, 2, 3, 3)
    x = rng.normal(size=(1, 3, 3))
    up = rng.normal(size=(2, 3, 3))
    gi, gw, gb = conv_backward(x, spec, up)
    if corrupt:
        gi = gi * 1.01

    def obj():
        return dot(conv_forward(x, spec), up)

    return max(max_rel_error(gi, numerical_gradient(obj, x)),
               max_rel_error(gw, numerical_gradient(obj, spec.weights)),
               max_rel_error(gb, numerical_gradient(obj, spec.bias)))


def check_bilinear(seed: int = 0, n_points: int = 100, corrupt: bool = False) -> float:
    rng = Rng(seed)
    f = rng.normal(size=(2, 5, 6))
    worst = 0.0
    for _ in range(n_points):
        # stay 1e-3 away from the cell-centre lines where the slope jumps
        p = np.array([rng.integers(-1, 6) + 0.5 + rng.uniform(1e-3, 1 - 1e-3),
                      rng.integers(-1, 7) + 0.5 + rng.uniform(1e-3, 1 - 1e-3)])
        up = rng.normal()
        cells, gp = bilinear_grads(f, tuple(p), 1, up)
        gp = np.array(gp) * (1.01 if corrupt else 1.0)
        num = numerical_gradient(lambda: up * bilinear_sample(f, tuple(p), 1), p)
        worst = max(worst, max_rel_error(gp, num))
        g_cells = np.zeros_like(f[1])
        for (r, c), v in cells:
            g_cells[r, c] += v
        f1 = f[1].copy()
        num_cells = numerical_gradient(
            lambda: up * bilinear_sample(np.stack([f[0], f1]), tuple(p), 1), f1)
        worst = max(worst, max_rel_error(g_cells, num_cells))
    return worst


def check_deform(seed: int = 0, corrupt: bool = False) -> float:
    rng = Rng(seed)
    spec = ConvSpec.random(rng, 1, 2, 3, 3)
    x = rng.normal(size=(1, 4, 4))
    off = _off_grid(rng, (18, 4, 4))
    up = rng.normal(size=(2, 4, 4))

    def obj():
        return dot(deform_conv_forward(x, spec, OffsetField(off)), up)

    gi, gw, gb, go = deform_conv_backward(x, spec, OffsetField(off), up)
    if corrupt:
        go = go * 1.01
    return max(max_rel_error(gi, numerical_gradient(obj, x)),
               max_rel_error(go, numerical_gradient(obj, off)),
               max_rel_error(gw, numerical_gradient(obj, spec.weights)),
               max_rel_error(gb, numerical_gradient(obj, spec.bias)))


def check_focal(seed: int = 0, corrupt: bool = False) -> float:
    rng = Rng(seed)
    x = rng.normal(0, 3, size=(20, 3))
    t = (rng.uniform(size=(20, 3)) < 0.3).astype(np.float64)
    m = (rng.uniform(size=(20, 3)) < 0.8).astype(np.float64)
    _, g = focal_loss(x, t, m, 0.25, 2.0, 4.0)
    if corrupt:
        g = g * 1.01
    # the loss is a weighted sum of independent per-logit terms, so each partial
    # is the central difference of its own term
    num = (focal_terms(x + EPS, t, 0.25, 2.0)[0]
           - focal_terms(x - EPS, t, 0.25, 2.0)[0]) / (2 * EPS) * m / 4.0
    return max_rel_error(g, num)


def check_smooth_l1(seed: int = 0, corrupt: bool = False) -> float:
    rng = Rng(seed)
    beta = 1.0 / 9
    tgt = rng.normal(size=(10, 4))
    # keep |d| away from the beta kink and from 0
    d = rng.uniform(0.01, 0.5, size=(10, 4)) * np.where(rng.uniform(size=(10, 4)) < 0.5, -1, 1)
    d = np.where(np.abs(np.abs(d) - beta) < 0.01, d * 2, d)
    pred = tgt + d
    _, g = smooth_l1(pred, tgt, beta)
    if corrupt:
        g = g * 1.01
    num = numerical_gradient(lambda: smooth_l1(pred, tgt, beta)[0], pred)
    return max_rel_error(g, num)


def check_end_to_end(seed: int = 0, n_params: int = 20, variant: str = "roiconv",
                     corrupt: bool = False, max_draws: int = 400) -> float:
    """Total detector loss w.r.t. a seeded sample of scalar parameters.

    Refined anchors are held at their base-point values while differencing,
    which is exactly the stop-gradient the analytic pass implements. A drawn
    parameter whose +-eps probe crosses a kink (ReLU sign, bilinear cell or
    smooth-L1 branch change) is skipped and another one drawn. The difference
    quotient is an exactly rounded sum of per-entry loss differences, so
    rounding of the scalar total does not swamp small partials.
    """
    config = DetectionConfig(variant=variant, seed=seed)
    model = init_model(config)
    scenes = generate_dataset(seed + 1, 2, config.image_size)
    base = loss_and_grads(model, scenes, config)
    rng = Rng(seed).spawn(7)
    names = sorted(model.params)
    worst, checked = 0.0, 0
    for _ in range(max_draws):
        if checked == n_params:
            break
        name = names[rng.integers(0, len(names))]
        flat = model.params[name].reshape(-1)
        idx = rng.integers(0, flat.size)
        old = flat[idx]
        probes = []
        for x in (old + EPS, old - EPS):
            flat[idx] = x
            probes.append(loss_and_grads(model, scenes, config, refined=base.refined,
                                         need_grads=False))
        flat[idx] = old
        if any(p.pattern != base.pattern for p in probes):
            continue
        num = math.fsum(probes[0].contributions - probes[1].contributions) / (2 * EPS)
        ana = base.grads[name].reshape(-1)[idx] * (1.01 if corrupt else 1.0)
        worst = max(worst, max_rel_error([ana], [num]))
        checked += 1
    if checked < n_params:
        raise RuntimeError(f"only {checked} of {n_params} parameters were kink-free")
    return worst


OPERATOR_CHECKS = {
    "conv": check_conv,
    "bilinear": check_bilinear,
    "deform_conv": check_deform,
    "focal_loss": check_focal,
    "smooth_l1": check_smooth_l1,
}


def run_all(seed: int = 0, operator_tol: float = OPERATOR_TOL,
            end_to_end_tol: float = END_TO_END_TOL, corrupt=(), n_params: int = 20) -> dict:
    """Run every check; ``corrupt`` names checks whose analytic side is perturbed."""
    report = {}
    for name, fn in OPERATOR_CHECKS.items():
        err = fn(seed, corrupt=name in corrupt)
        report[name] = {"max_rel_error": err, "tolerance": operator_tol, "ok": err <= operator_tol}
    for variant in ("vanilla_conv", "learned_deform", "roiconv"):
        name = f"end_to_end[{variant}]"
        err = check_end_to_end(seed, n_params, variant, corrupt=name in corrupt
                               or "end_to_end" in corrupt)
        report[name] = {"max_rel_error": err, "tolerance": end_to_end_tol,
                        "ok": err <= end_to_end_tol}
    return report
