"""Command-line entry point: ``aligndet <command> [--config run.json] ...``.

Exit codes: 0 when every check passes, 1 when a check is violated (or a run
aborts), 2 for usage and configuration errors. Every command writes
``manifest.json`` with the fully resolved configuration into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import implicit_roi_sizes, misalignment_table
from .bench import run_bench
from .boxes import alignment_histogram, histogram_csv, iou
from .config import VARIANTS, ConfigError, DetectionConfig
from .evaluation import evaluate, evaluate_detections
from .experiment import (alignment_pairs, compare_variants, comparison_table, eval_scenes,
                         load_checkpoint, loss_curve_csv, save_checkpoint, train)
from .gradcheck import END_TO_END_TOL, OPERATOR_CHECKS, OPERATOR_TOL, run_all
from .model import TrainingError, init_model
from .verify import run_verify

log = logging.getLogger("aligndet")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2

# command-specific RunConfig fields and their defaults
COMMAND_DEFAULTS = {
    "verify": {"cases": 100, "tol": 1e-10, "identity_tol": 1e-12, "boxes": 1000,
               "box_tol": 1e-9, "adjoint_cases": 20, "adjoint_tol": 1e-12},
    "gradcheck": {"operator_tol": OPERATOR_TOL, "end_to_end_tol": END_TO_END_TOL,
                  "n_params": 20, "corrupt": []},
    "analyze": {"strides": [8, 16, 32, 64, 128], "kernels": [3], "ratios": [0.5, 1.0, 2.0],
                "arms": ["vanilla_conv", "roiconv"], "checkpoints": {}, "scenes": 20,
                "bin_width": 0.05},
    "train": {"steps": 2000, "n_train": 2000, "log_every": 0},
    "eval": {"checkpoint": None, "detections": None, "n_eval": 200},
    "compare": {"seeds": [0, 1, 2], "steps": 2000, "n_train": 2000, "n_eval": 200,
                "variants": list(VARIANTS), "bin_width": 0.05},
    "bench": {"kernels": [3, 5, 7], "channels": 256, "spatial": 8, "iterations": 100,
              "warmup": 10, "max_ratio": 1.1},
}
F64_ONLY = {"gradcheck", "train", "eval", "compare"}


class UsageError(Exception):
    pass


def resolve_config(command: str, raw: dict, seed: int | None) -> tuple[DetectionConfig, dict]:
    """Split a RunConfig document into detector and command fields, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    det_keys = set(DetectionConfig.__dataclass_fields__)
    cmd_defaults = COMMAND_DEFAULTS[command]
    unknown = set(raw) - det_keys - set(cmd_defaults)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    det = {k: v for k, v in raw.items() if k in det_keys}
    if seed is not None:
        det["seed"] = seed
    try:
        config = DetectionConfig.from_dict(det)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    opts = {**cmd_defaults, **{k: v for k, v in raw.items() if k in cmd_defaults}}
    return config, opts


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_paths(command: str, opts: dict) -> None:
    paths = []
    if command == "analyze":
        paths = list(opts["checkpoints"].values())
        if "learned_deform" in opts["arms"] and "learned_deform" not in opts["checkpoints"]:
            raise UsageError("the learned_deform arm needs a checkpoint "
                             "(set checkpoints.learned_deform)")
        unknown = set(opts["arms"]) - set(VARIANTS)
        if unknown:
            raise UsageError(f"unknown arms {sorted(unknown)}")
    elif command == "compare":
        if len(opts["seeds"]) < 3:
            raise UsageError("compare needs at least 3 seeds")
        unknown = set(opts["variants"]) - set(VARIANTS)
        if unknown:
            raise UsageError(f"unknown variants {sorted(unknown)}")
    elif command == "eval":
        if (opts["checkpoint"] is None) == (opts["detections"] is None):
            raise UsageError("eval needs exactly one of checkpoint or detections")
        paths = [opts["checkpoint"] or opts["detections"]]
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"path does not exist: {p}")


# -- commands ---------------------------------------------------------------

def cmd_verify(config, opts, out: Path, dtype) -> int:
    report = run_verify(config.seed, opts["cases"], opts["tol"], opts["identity_tol"],
                        opts["boxes"], opts["box_tol"], opts["adjoint_cases"],
                        opts["adjoint_tol"], dtype)
    _write_json(out / "verify.json", report)
    for name, sec in report["sections"].items():
        print(f"{name}: max error {sec['max_abs_error']:.3e} "
              f"(tol {sec['tolerance']:.0e}) {'ok' if sec['ok'] else 'FAIL'}")
    return EXIT_OK if report["ok"] else EXIT_VIOLATION


def cmd_gradcheck(config, opts, out: Path, dtype) -> int:
    report = run_all(config.seed, opts["operator_tol"], opts["end_to_end_tol"],
                     corrupt=tuple(opts["corrupt"]), n_params=opts["n_params"])
    _write_json(out / "gradcheck.json", report)
    for name, r in report.items():
        print(f"{name}: max rel error {r['max_rel_error']:.3e} (tol {r['tolerance']:.0e}) "
              f"{'ok' if r['ok'] else 'FAIL'}")
    return EXIT_OK if all(r["ok"] for r in report.values()) else EXIT_VIOLATION


def cmd_analyze(config, opts, out: Path, dtype) -> int:
    sizes = implicit_roi_sizes(opts["strides"], opts["kernels"])
    table = misalignment_table(opts["strides"], opts["kernels"][0], config.anchor_scale,
                               opts["ratios"])
    scenes = eval_scenes(config, opts["scenes"])
    arms = {}
    for arm in opts["arms"]:
        if arm in opts["checkpoints"]:
            model, cfg = load_checkpoint(opts["checkpoints"][arm])
            if cfg.variant != arm:
                raise UsageError(f"checkpoint for {arm} was trained as {cfg.variant}")
        else:
            cfg = config.replace(variant=arm)
            model = init_model(cfg)
        rois, anchors = alignment_pairs(model, scenes, cfg)
        edges, counts = alignment_histogram(rois, anchors, opts["bin_width"])
        (out / f"histogram_{arm}.csv").write_text(histogram_csv(edges, counts))
        ious = [iou(r, a) for r, a in zip(rois, anchors)]
        arms[arm] = {"mean_iou": float(np.mean(ious)), "min_iou": float(np.min(ious)),
                     "top_bin_fraction": float(counts[-1] / counts.sum()),
                     "checkpoint": opts["checkpoints"].get(arm)}
    lines = ["stride,kernel,rows,cols"] + [f"{r['stride']},{r['kernel']},{r['rows']},{r['cols']}"
                                            for r in sizes]
    (out / "implicit_roi_sizes.csv").write_text("\n".join(lines) + "\n")
    lines = ["stride,ratio,anchor_rows,anchor_cols,implicit_side,iou"]
    lines += [f"{r['stride']},{r['ratio']},{r['anchor_rows']:.4f},{r['anchor_cols']:.4f},"
              f"{r['implicit_side']},{r['iou']:.6f}" for r in table]
    (out / "misalignment.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "analysis.json", {"implicit_roi_sizes": sizes, "misalignment": table,
                                        "arms": arms})
    for r in sizes:
        print(f"stride {r['stride']:>4} kernel {r['kernel']}: implicit RoI "
              f"{r['rows']:g}x{r['cols']:g}")
    for arm, a in arms.items():
        print(f"{arm}: mean IoU {a['mean_iou']:.4f}, top-bin fraction {a['top_bin_fraction']:.3f}")
    return EXIT_OK


def cmd_train(config, opts, out: Path, dtype) -> int:
    res = train(config, opts["steps"], n_scenes=opts["n_train"], log_every=opts["log_every"])
    save_checkpoint(res.model, config, out / "checkpoint")
    (out / "loss_curve.csv").write_text(loss_curve_csv(res.losses))
    print(f"trained {config.variant} for {opts['steps']} steps, "
          f"final loss {res.losses[-1]['total']:.4f}" if res.losses else "no steps run")
    return EXIT_OK


def _load_detections_fixture(path) -> tuple[list, list, int]:
    """``{"num_classes": K, "scenes": [{"detections": [[x1,y1,x2,y2,score,cls],...],
    "gts": [[x1,y1,x2,y2,cls],...]}, ...]}``."""
    doc = json.loads(Path(path).read_text())
    dets, gts = [], []
    for scene in doc["scenes"]:
        d = np.asarray(scene["detections"], dtype=np.float64).reshape(-1, 6)
        g = np.asarray(scene["gts"], dtype=np.float64).reshape(-1, 5)
        dets.append((d[:, :4], d[:, 4], d[:, 5].astype(np.int64)))
        gts.append((g[:, :4], g[:, 4].astype(np.int64)))
    return dets, gts, int(doc["num_classes"])


def cmd_eval(config, opts, out: Path, dtype) -> int:
    if opts["detections"] is not None:
        dets, gts, k = _load_detections_fixture(opts["detections"])
        metrics = evaluate_detections(dets, gts, k)
    else:
        model, cfg = load_checkpoint(opts["checkpoint"])
        metrics = evaluate(model, eval_scenes(cfg, opts["n_eval"]), cfg)
    _write_json(out / "metrics.json", metrics)
    print(f"AP50 {metrics['AP50']:.4f}  AP75 {metrics['AP75']:.4f}  mAP {metrics['mAP']:.4f}")
    return EXIT_OK


def cmd_compare(config, opts, out: Path, dtype) -> int:
    report = compare_variants(config, opts["seeds"], opts["steps"], opts["n_train"],
                              opts["n_eval"], opts["variants"], opts["bin_width"])
    _write_json(out / "comparison.json", report)
    table = comparison_table(report)
    (out / "comparison.csv").write_text(table)
    for name, arm in report["arms"].items():
        h = arm["histogram"]
        (out / f"histogram_{name}.csv").write_text(
            histogram_csv(np.array(h["edges"]), np.array(h["counts"])))
    print(table, end="")
    return EXIT_OK


def cmd_bench(config, opts, out: Path, dtype) -> int:
    report = run_bench(opts["kernels"], opts["channels"], opts["spatial"], config.stride,
                       opts["iterations"], opts["warmup"], config.seed, dtype)
    report["ok"] = bool(report["max_ratio"] <= opts["max_ratio"] and report["monotonic"])
    _write_json(out / "bench.json", report)
    lines = ["kernel,conv_s,deform_conv_s,roiconv_s,ratio_roiconv_deform"]
    lines += [f"{r['kernel']},{r['conv']:.6e},{r['deform_conv']:.6e},{r['roiconv']:.6e},"
              f"{r['ratio_roiconv_deform']:.4f}" for r in report["timings"]]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    flines = ["kernel,op,sampling_macs,offset_macs"]
    flines += [f"{r['kernel']},{r['op']},{r['sampling_macs']},{r['offset_macs']}"
               for r in report["flops"]]
    (out / "flops.csv").write_text("\n".join(flines) + "\n")
    print("\n".join(lines))
    print(f"max roiconv/deform ratio {report['max_ratio']:.3f}, "
          f"monotonic in kernel size: {report['monotonic']}, build: {report['build']['mode']}")
    return EXIT_OK if report["ok"] else EXIT_VIOLATION


COMMANDS = {"verify": cmd_verify, "gradcheck": cmd_gradcheck, "analyze": cmd_analyze,
            "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aligndet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", type=Path, help="RunConfig JSON file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f64")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "gradcheck":
            p.add_argument("--corrupt", action="append", default=None, metavar="CHECK",
                           help="perturb the analytic gradient of CHECK (test canary); "
                                f"one of {sorted(OPERATOR_CHECKS)} or end_to_end")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path("runs") / args.command
    try:
        raw = {}
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise UsageError(f"cannot read config {args.config}: {e}") from e
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be a non-negative integer")
        config, opts = resolve_config(args.command, raw, args.seed)
        if getattr(args, "corrupt", None):
            opts["corrupt"] = list(opts["corrupt"]) + args.corrupt
        if args.precision == "f32" and args.command in F64_ONLY:
            raise UsageError(f"{args.command} runs in double precision only")
        _check_paths(args.command, opts)
        out.mkdir(parents=True, exist_ok=True)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    dtype = np.float32 if args.precision == "f32" else np.float64
    manifest = {"command": args.command, "version": __version__, "seed": config.seed,
                "precision": args.precision, "config": config.to_dict(), "options": opts}
    _write_json(out / "manifest.json", manifest)
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](config, opts, out, dtype)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_VIOLATION
    log.info("%s finished in %.1f s with exit code %d", args.command,
             time.perf_counter() - start, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
