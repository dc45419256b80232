"""Training loop, checkpoints and the alignment-variant comparison."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from statistics import median

import numpy as np

from .boxes import alignment_histogram, decode_offsets_to_roi, iou
from .config import VARIANTS, DetectionConfig
from .evaluation import evaluate
from .model import ModelState, TrainingError, forward_image, init_model, loss_and_grads
from .ops import implicit_roi
from .scenes import generate_dataset
from .tensor import Rng, load_rten, save_rten

log = logging.getLogger(__name__)

EVAL_SEED = 0x5EED_E7A1


@dataclass
class TrainResult:
    model: ModelState
    losses: list  # one dict per step


def _stream_seed(seed: int, stream: int) -> int:
    return Rng(seed).spawn(stream).seed


def train_scenes(config: DetectionConfig, n: int):
    return generate_dataset(_stream_seed(config.seed, 1), n, config.image_size)


def eval_scenes(config: DetectionConfig, n: int):
    return generate_dataset(EVAL_SEED, n, config.image_size)


def sgd_step(model: ModelState, grads: dict, config: DetectionConfig) -> None:
    """SGD with momentum and global-norm gradient clipping, in place."""
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    clip = 1.0
    if config.grad_clip and norm > config.grad_clip:
        clip = config.grad_clip / norm
    for k, g in grads.items():
        buf = model.momentum.get(k)
        if buf is None:
            buf = model.momentum[k] = np.zeros_like(g)
        buf *= config.momentum
        buf += clip * g
        model.params[k] -= config.lr * buf


def train(config: DetectionConfig, n_steps: int, scenes=None, n_scenes: int = 2000,
          model: ModelState | None = None, log_every: int = 0) -> TrainResult:
    """Train for ``n_steps`` mini-batches; deterministic given ``config.seed``.

    Batches walk a per-epoch permutation of ``scenes`` (generated from the
    seed when not given).
    """
    if scenes is None:
        scenes = train_scenes(config, n_scenes)
    model = init_model(config) if model is None else model
    order_rng = Rng(config.seed).spawn(2)
    order = np.zeros(0, dtype=np.int64)
    losses = []
    for step in range(n_steps):
        if len(order) < config.batch_size:
            perm = np.argsort(order_rng.uniform(size=len(scenes)), kind="stable")
            order = np.concatenate([order, perm])
        batch, order = order[:config.batch_size], order[config.batch_size:]
        try:
            res = loss_and_grads(model, [scenes[i] for i in batch], config)
        except ValueError as e:  # non-finite logits
            raise TrainingError(f"step {step}: {e}") from e
        if not np.isfinite(res.total):
            raise TrainingError(f"non-finite loss at step {step}: {res.parts}")
        sgd_step(model, res.grads, config)
        bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
        if bad:
            raise TrainingError(f"non-finite parameters {bad} after step {step}")
        losses.append({"step": step, "total": res.total, **res.parts})
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f %s", step, res.total,
                     " ".join(f"{k}={v:.3f}" for k, v in res.parts.items()))
    return TrainResult(model, losses)


def loss_curve_csv(losses) -> str:
    cols = ["step", "total", "dpm_cls", "dpm_reg", "adm_cls", "adm_reg"]
    lines = [",".join(cols)]
    for row in losses:
        lines.append(",".join(str(row[c]) if c == "step" else repr(float(row[c])) for c in cols))
    return "\n".join(lines) + "\n"


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: ModelState, config: DetectionConfig, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in sorted(model.params.items()):
        fname = name + ".rten"
        save_rten(path / fname, value)
        tensors[name] = {"file": fname, "shape": list(value.shape)}
    manifest = {"tensors": tensors, "kernels": {k: list(v) for k, v in model.kernels.items()},
                "config": config.to_dict(), "seed": config.seed}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = DetectionConfig.from_dict(manifest["config"])
    params = {name: load_rten(path / info["file"]) for name, info in manifest["tensors"].items()}
    kernels = {k: tuple(v) for k, v in manifest["kernels"].items()}
    return ModelState(params, kernels), config


# -- alignment analysis -------------------------------------------------------

def alignment_pairs(model: ModelState, scenes, config: DetectionConfig):
    """Implicit RoI of the ADM alignment conv and the refined anchor, per location."""
    n = config.feature_size
    k = (config.adm_kernel, config.adm_kernel)
    rois, anchors = [], []
    for scene in scenes:
        out, _ = forward_image(model, scene.image, config)
        refined = out["refined"].reshape(n, n, 4)
        off = None if out["offsets"] is None else out["offsets"].tensor
        for X in range(n):
            for Y in range(n):
                if off is None:
                    rois.append(tuple(implicit_roi(X, Y, k, config.stride)))
                else:
                    rois.append(tuple(decode_offsets_to_roi(off[:, X, Y], k, X, Y,
                                                            config.stride)))
                anchors.append(tuple(refined[X, Y]))
    return rois, anchors


def compare_variants(config: DetectionConfig, seeds, n_steps: int = 2000, n_train: int = 2000,
                     n_eval: int = 200, variants=VARIANTS, bin_width: float = 0.05) -> dict:
    """Train every alignment variant on every seed and summarise mAP and alignment."""
    if len(seeds) < 3:
        raise ValueError("compare_variants needs at least 3 seeds")
    evals = eval_scenes(config, n_eval)
    report = {"seeds": list(seeds), "n_steps": n_steps, "arms": {}}
    for variant in variants:
        runs = []
        rois, anchors = [], []
        for seed in seeds:
            cfg = config.replace(variant=variant, seed=int(seed))
            res = train(cfg, n_steps, n_scenes=n_train)
            metrics = evaluate(res.model, evals, cfg)
            r, a = alignment_pairs(res.model, evals[:20], cfg)
            rois += r
            anchors += a
            runs.append({"seed": int(seed), **{k: metrics[k] for k in ("mAP", "AP50", "AP75")},
                         "final_loss": res.losses[-1]["total"],
                         "params": res.model.num_parameters()})
            log.info("%s seed %d: mAP %.4f", variant, seed, metrics["mAP"])
        edges, counts = alignment_histogram(rois, anchors, bin_width)
        ious = [iou(p, q) for p, q in zip(rois, anchors)]
        report["arms"][variant] = {
            "runs": runs,
            "median_mAP": median(r["mAP"] for r in runs),
            "median_AP50": median(r["AP50"] for r in runs),
            "median_AP75": median(r["AP75"] for r in runs),
            "mean_alignment_iou": float(np.mean(ious)),
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }
    return report


def comparison_table(report: dict) -> str:
    lines = ["variant,median_mAP,median_AP50,median_AP75,mean_alignment_iou"]
    for name, arm in report["arms"].items():
        lines.append(f"{name},{arm['median_mAP']:.4f},{arm['median_AP50']:.4f},"
                     f"{arm['median_AP75']:.4f},{arm['mean_alignment_iou']:.4f}")
    return "\n".join(lines) + "\n"
