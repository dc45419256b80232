"""The toy AlignDet network: backbone, dense proposal module and aligned detection module.

Everything is hand-differentiated on top of :mod:`aligndet.ops`. A batch is
processed one image at a time; losses are pooled over the batch before
normalisation so the positive count is shared.

Layout (``S = 2 ** len(backbone_channels)``)::

    image (1, 64, 64)
      -> [3x3 conv, stride 2, ReLU] x 3            backbone feature F, stride 8
    DPM: F -> 3x3 conv, ReLU -> 1x1 objectness logit, 1x1 box deltas
    refined anchors = decode(pre-defined anchor, DPM deltas)   (no gradient)
    ADM: F -> alignment conv (variant), ReLU -> 1x1 class logits, 1x1 deltas
         deltas are relative to the refined anchors
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import NEGATIVE, assign_labels, decode_boxes, encode_boxes, make_anchor_grid
from .config import DetectionConfig
from .losses import focal_loss, focal_terms, smooth_l1, smooth_l1_terms
from .ops import (ConvSpec, OffsetField, conv_backward, conv_forward, deform_conv_backward,
                  deform_conv_forward, deform_sampling_points, roiconv_offsets)
from .tensor import Rng

PRIOR_PROB = 0.01
HEAD_STD = 0.01


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelState:
    params: dict
    kernels: dict  # name -> (h, w)
    momentum: dict = field(default_factory=dict)

    def spec(self, name: str) -> ConvSpec:
        h, w = self.kernels[name]
        return ConvSpec.from_weights(self.params[name + ".w"], self.params[name + ".b"], (h, w))

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()}, dict(self.kernels),
                          {k: v.copy() for k, v in self.momentum.items()})

    def num_parameters(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))


def init_model(config: DetectionConfig, seed: int | None = None) -> ModelState:
    """He-initialised trunk, Gaussian(0.01) output taps, focal prior on class biases.

    The learned-offset convolution draws from its own stream, so every variant
    shares bit-identical values for all other parameters given the seed.
    """
    rng = Rng(config.seed if seed is None else seed).spawn(0)
    params, kernels = {}, {}

    def add(name, cin, cout, k, std=None, bias=0.0, stream=rng):
        fan_in = cin * k * k
        s = np.sqrt(2.0 / fan_in) if std is None else std
        params[name + ".w"] = stream.normal(0.0, s, size=(cout, fan_in))
        params[name + ".b"] = np.full(cout, float(bias))
        kernels[name] = (k, k)

    prior = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
    cin = 1
    for i, c in enumerate(config.backbone_channels):
        add(f"backbone.{i}", cin, c, 3)
        cin = c
    feat = cin
    add("dpm.trunk", feat, config.head_channels, 3)
    add("dpm.cls", config.head_channels, 1, 1, HEAD_STD, prior)
    add("dpm.reg", config.head_channels, 4, 1, HEAD_STD)
    k = config.adm_kernel
    add("adm.align", feat, config.adm_channels, k)
    add("adm.cls", config.adm_channels, config.num_classes, 1, HEAD_STD, prior)
    add("adm.reg", config.adm_channels, 4, 1, HEAD_STD)
    if config.variant == "learned_deform":
        add("adm.offset", feat, 2 * k * k, 1, HEAD_STD, stream=rng.spawn(1))
    return ModelState(params, kernels)


def anchor_grid(config: DetectionConfig) -> np.ndarray:
    n = config.feature_size
    return make_anchor_grid(n, n, config.stride, config.anchor_scale, config.anchor_ratio).flat()


# -- per-image forward / backward ------------------------------------------

def _conv1x1(x, w, b):
    C, H, W = x.shape
    return (w @ x.reshape(C, H * W) + b[:, None]).reshape(-1, H, W)


def _conv1x1_back(x, w, g):
    C, H, W = x.shape
    x2 = x.reshape(C, H * W)
    g2 = g.reshape(g.shape[0], H * W)
    return (w.T @ g2).reshape(C, H, W), g2 @ x2.T, g2.sum(axis=1)


def forward_image(model: ModelState, image: np.ndarray, config: DetectionConfig,
                  refined=None):
    """Run one image; returns ``(outputs, cache)``.

    ``refined`` overrides the decoded DPM anchors (used to hold them fixed
    while finite-differencing).
    """
    p = model.params
    cache = {"acts": []}
    x = image
    for i in range(len(config.backbone_channels)):
        spec = model.spec(f"backbone.{i}")
        pre = conv_forward(x, spec)[:, ::2, ::2]
        cache["acts"].append((x, pre))
        x = np.maximum(pre, 0)
    feat = x
    cache["feat"] = feat

    t_pre = conv_forward(feat, model.spec("dpm.trunk"))
    t = np.maximum(t_pre, 0)
    dpm_logit = _conv1x1(t, p["dpm.cls.w"], p["dpm.cls.b"])
    dpm_delta = _conv1x1(t, p["dpm.reg.w"], p["dpm.reg.b"])
    cache.update(t_pre=t_pre, t=t)

    anchors = anchor_grid(config)
    n = config.feature_size
    dpm_delta_flat = dpm_delta.reshape(4, -1).T
    if refined is None:
        refined = decode_boxes(anchors, dpm_delta_flat, config.image_size, 1.0)

    align = model.spec("adm.align")
    offsets = None
    if config.variant == "vanilla_conv":
        a_pre = conv_forward(feat, align)
    else:
        if config.variant == "roiconv":
            offsets = roiconv_offsets(refined.reshape(n, n, 4), align, config.stride)
        else:
            offsets = OffsetField(_conv1x1(feat, p["adm.offset.w"], p["adm.offset.b"]))
        a_pre = deform_conv_forward(feat, align, offsets)
    a = np.maximum(a_pre, 0)
    adm_logit = _conv1x1(a, p["adm.cls.w"], p["adm.cls.b"])
    adm_delta = _conv1x1(a, p["adm.reg.w"], p["adm.reg.b"])
    cache.update(a_pre=a_pre, a=a, offsets=offsets)

    out = {
        "dpm_logits": dpm_logit.reshape(-1),
        "dpm_deltas": dpm_delta_flat,
        "refined": refined,
        "offsets": offsets,
        "adm_logits": adm_logit.reshape(config.num_classes, -1).T,
        "adm_deltas": adm_delta.reshape(4, -1).T,
    }
    return out, cache


def backward_image(model: ModelState, config: DetectionConfig, cache, grads_out, grads):
    """Accumulate parameter gradients for one image into ``grads``.

    ``grads_out`` holds gradients w.r.t. the four head outputs in the flat
    layouts returned by :func:`forward_image`.
    """
    p = model.params
    n = config.feature_size
    feat = cache["feat"]

    def acc(name, gw, gb):
        grads[name + ".w"] += gw
        grads[name + ".b"] += gb

    # ADM
    a = cache["a"]
    g_cls = grads_out["adm_logits"].T.reshape(config.num_classes, n, n)
    g_reg = grads_out["adm_deltas"].T.reshape(4, n, n)
    ga1, gw, gb = _conv1x1_back(a, p["adm.cls.w"], g_cls)
    acc("adm.cls", gw, gb)
    ga2, gw, gb = _conv1x1_back(a, p["adm.reg.w"], g_reg)
    acc("adm.reg", gw, gb)
    g_apre = (ga1 + ga2) * (cache["a_pre"] > 0)
    align = model.spec("adm.align")
    if config.variant == "vanilla_conv":
        g_feat, gw, gb = conv_backward(feat, align, g_apre)
    else:
        trainable = config.variant == "learned_deform"
        g_feat, gw, gb, g_off = deform_conv_backward(feat, align, cache["offsets"], g_apre,
                                                     offsets_trainable=trainable)
        if trainable:
            gf, gow, gob = _conv1x1_back(feat, p["adm.offset.w"], g_off)
            acc("adm.offset", gow, gob)
            g_feat = g_feat + gf
    acc("adm.align", gw, gb)

    # DPM
    t = cache["t"]
    g_cls = grads_out["dpm_logits"].reshape(1, n, n)
    g_reg = grads_out["dpm_deltas"].T.reshape(4, n, n)
    gt1, gw, gb = _conv1x1_back(t, p["dpm.cls.w"], g_cls)
    acc("dpm.cls", gw, gb)
    gt2, gw, gb = _conv1x1_back(t, p["dpm.reg.w"], g_reg)
    acc("dpm.reg", gw, gb)
    g_tpre = (gt1 + gt2) * (cache["t_pre"] > 0)
    gf, gw, gb = conv_backward(feat, model.spec("dpm.trunk"), g_tpre)
    acc("dpm.trunk", gw, gb)
    g = g_feat + gf

    # backbone, last layer first
    for i in reversed(range(len(config.backbone_channels))):
        x, pre = cache["acts"][i]
        g = g * (pre > 0)
        full = np.zeros((g.shape[0],) + x.shape[1:], dtype=g.dtype)
        full[:, ::2, ::2] = g
        gx, gw, gb = conv_backward(x, model.spec(f"backbone.{i}"), full)
        acc(f"backbone.{i}", gw, gb)
        g = gx


# -- losses over a batch ----------------------------------------------------

LOSS_TERMS = ("dpm_cls", "dpm_reg", "adm_cls", "adm_reg")


@dataclass
class BatchLoss:
    total: float
    parts: dict
    grads: dict
    refined: list
    counts: dict
    pattern: bytes = b""  # which piece of every piecewise op was active
    contributions: np.ndarray | None = None  # per-entry terms summing to ``total``


def _pattern(caches, config, reg_inside) -> bytes:
    """Fingerprint of ReLU signs, bilinear cells and smooth-L1 branches.

    Two parameter settings with equal fingerprints lie on the same smooth
    piece of the loss, so a finite difference between them is meaningful.
    """
    parts = []
    for cache in caches:
        for _, pre in cache["acts"]:
            parts.append(np.packbits(pre > 0).tobytes())
        parts.append(np.packbits(cache["t_pre"] > 0).tobytes())
        parts.append(np.packbits(cache["a_pre"] > 0).tobytes())
        if cache["offsets"] is not None:
            k = (config.adm_kernel, config.adm_kernel)
            xs, ys = deform_sampling_points(k, cache["offsets"])
            parts.append(np.floor(xs - 0.5).astype(np.int64).tobytes())
            parts.append(np.floor(ys - 0.5).astype(np.int64).tobytes())
    parts += [np.packbits(m).tobytes() for m in reg_inside]
    return b"".join(parts)


def loss_and_grads(model: ModelState, scenes, config: DetectionConfig, refined=None,
                   terms=LOSS_TERMS, need_grads: bool = True) -> BatchLoss:
    """Total detection loss over ``scenes`` and its parameter gradients.

    DPM labels come from the pre-defined anchors, ADM labels from the refined
    anchors of the current forward pass. ``refined`` (one array per scene)
    pins the refined anchors instead; the analytic gradient is the same either
    way because refined anchors carry no gradient.
    """
    anchors = anchor_grid(config)
    outs, caches = [], []
    dpm_lab, adm_lab, used_refined = [], [], []
    for k, scene in enumerate(scenes):
        out, cache = forward_image(model, scene.image, config,
                                   None if refined is None else refined[k])
        outs.append(out)
        caches.append(cache)
        used_refined.append(out["refined"])
        dpm_lab.append(assign_labels(anchors, scene.boxes, config.dpm_fg, config.dpm_bg))
        adm_lab.append(assign_labels(out["refined"], scene.boxes, config.adm_fg, config.adm_bg))

    # DPM objectness
    d_logits = np.concatenate([o["dpm_logits"] for o in outs])
    d_pos = np.concatenate([la.positive for la in dpm_lab])
    d_w = np.concatenate([~la.ignored for la in dpm_lab]).astype(np.float64)
    n_dpm = max(1, int(d_pos.sum()))
    l_dcls, g_dcls = focal_loss(d_logits, d_pos, d_w, config.focal_alpha, config.focal_gamma,
                                n_dpm)
    # DPM regression
    d_pred = np.concatenate([o["dpm_deltas"] for o in outs])
    d_tgt = np.concatenate([la.targets(anchors, s.boxes) for la, s in zip(dpm_lab, scenes)])
    l_dreg, g_d = smooth_l1(d_pred[d_pos], d_tgt[d_pos], config.smooth_l1_beta)
    g_dreg = np.zeros_like(d_pred)
    g_dreg[d_pos] = g_d

    # ADM classification: one sigmoid per class
    a_logits = np.concatenate([o["adm_logits"] for o in outs])
    a_lab = np.concatenate([la.labels for la in adm_lab])
    a_pos = a_lab >= 0
    gt_cls = np.concatenate([
        np.where(la.labels >= 0, s.classes[np.maximum(la.labels, 0)] if len(s.classes) else 0, -1)
        for la, s in zip(adm_lab, scenes)])
    onehot = np.zeros_like(a_logits)
    onehot[a_pos, gt_cls[a_pos]] = 1.0
    a_w = np.repeat(((a_lab >= 0) | (a_lab == NEGATIVE)).astype(np.float64)[:, None],
                    config.num_classes, axis=1)
    n_adm = max(1, int(a_pos.sum()))
    l_acls, g_acls = focal_loss(a_logits, onehot, a_w, config.focal_alpha, config.focal_gamma,
                                n_adm)
    a_pred = np.concatenate([o["adm_deltas"] for o in outs])
    a_tgt = np.concatenate([la.targets(o["refined"], s.boxes)
                            for la, o, s in zip(adm_lab, outs, scenes)])
    l_areg, g_a = smooth_l1(a_pred[a_pos], a_tgt[a_pos], config.smooth_l1_beta)
    g_areg = np.zeros_like(a_pred)
    g_areg[a_pos] = g_a

    rw = config.reg_weight
    parts = {"dpm_cls": l_dcls, "dpm_reg": rw * l_dreg, "adm_cls": l_acls, "adm_reg": rw * l_areg}
    scale = {t: (1.0 if t in terms else 0.0) for t in LOSS_TERMS}
    total = sum(parts[t] * scale[t] for t in LOSS_TERMS)
    counts = {"dpm_pos": int(d_pos.sum()), "adm_pos": int(a_pos.sum()),
              "adm_ignore": int((a_lab == -2).sum())}

    grads = None
    if need_grads:
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        hw = config.feature_size ** 2
        for k, cache in enumerate(caches):
            sl = slice(k * hw, (k + 1) * hw)
            go = {
                "dpm_logits": g_dcls[sl] * scale["dpm_cls"],
                "dpm_deltas": g_dreg[sl] * rw * scale["dpm_reg"],
                "adm_logits": g_acls[sl] * scale["adm_cls"],
                "adm_deltas": g_areg[sl] * rw * scale["adm_reg"],
            }
            backward_image(model, config, cache, go, grads)
    beta = config.smooth_l1_beta
    inside = [np.abs(d_pred[d_pos] - d_tgt[d_pos]) < beta,
              np.abs(a_pred[a_pos] - a_tgt[a_pos]) < beta]
    fa, fg = config.focal_alpha, config.focal_gamma
    pieces = {
        "dpm_cls": focal_terms(d_logits, d_pos, fa, fg)[0] * d_w / n_dpm,
        "dpm_reg": rw * smooth_l1_terms(d_pred[d_pos], d_tgt[d_pos], beta) / max(d_tgt[d_pos].size, 1),
        "adm_cls": focal_terms(a_logits, onehot, fa, fg)[0] * a_w / n_adm,
        "adm_reg": rw * smooth_l1_terms(a_pred[a_pos], a_tgt[a_pos], beta) / max(a_tgt[a_pos].size, 1),
    }
    contributions = np.concatenate([pieces[t].ravel() * scale[t] for t in LOSS_TERMS])
    return BatchLoss(float(total), parts, grads, used_refined, counts,
                     _pattern(caches, config, inside), contributions)


def forward(model: ModelState, scene, config: DetectionConfig):
    """``(dpm_outputs, refined_anchors, adm_outputs)`` for one scene."""
    out, _ = forward_image(model, scene.image, config)
    dpm = {"logits": out["dpm_logits"], "deltas": out["dpm_deltas"]}
    adm = {"logits": out["adm_logits"], "deltas": out["adm_deltas"], "offsets": out["offsets"]}
    return dpm, out["refined"], adm
