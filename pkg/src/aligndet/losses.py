"""Focal and smooth-L1 losses, each returning ``(value, gradient)``."""

from __future__ import annotations

import numpy as np


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_terms(logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Per-entry ``-alpha_t (1 - p_t)^gamma log p_t`` and its derivative."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logits")
    pos = np.asarray(targets) > 0
    # log p_t and log(1 - p_t) straight from the logit so neither saturates
    log_pt = np.where(pos, _log_sigmoid(x), _log_sigmoid(-x))
    pt = np.exp(log_pt)
    one_m = np.exp(np.where(pos, _log_sigmoid(-x), _log_sigmoid(x)))
    alpha_t = np.where(pos, alpha, 1 - alpha)
    mod = one_m ** gamma
    terms = -alpha_t * mod * log_pt
    # dp_t/dx = s p_t (1 - p_t) with s = +1 for positives, -1 for negatives
    s = np.where(pos, 1.0, -1.0)
    dterms = alpha_t * s * (gamma * mod * pt * log_pt - mod * one_m)
    return terms, dterms


def focal_loss(logits, targets, weights, alpha: float = 0.25, gamma: float = 2.0,
               normalizer: float = 1.0):
    """Sigmoid focal loss summed over entries with ``weights`` 1.

    ``targets`` holds 0/1 per logit; ``weights`` is 0 for ignored anchors.
    The sum is divided by ``normalizer`` (the caller passes the positive count,
    at least 1). Returns ``(loss, d loss / d logits)``.
    """
    terms, dterms = focal_terms(logits, targets, alpha, gamma)
    m = np.asarray(weights, dtype=np.float64)
    return float((terms * m).sum() / normalizer), dterms * m / normalizer


def smooth_l1(pred, target, beta: float = 1.0 / 9, normalizer: float | None = None):
    """Huber-style loss ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta/2`` outside.

    Averaged over all coordinates unless ``normalizer`` is given. Returns
    ``(loss, d loss / d pred)``.
    """
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = d.size if normalizer is None else normalizer
    if d.size == 0:
        return 0.0, np.zeros_like(d)
    per = smooth_l1_terms(pred, target, beta)
    grad = np.where(np.abs(d) < beta, d / beta, np.sign(d)) / max(n, 1)
    return float(per.sum() / max(n, 1)), grad


def smooth_l1_terms(pred, target, beta: float = 1.0 / 9):
    """Unnormalised per-coordinate smooth-L1 values."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    return np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
