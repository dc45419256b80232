"""Single-threaded timing of conv, learned-offset deformable conv and RoIConv."""

from __future__ import annotations

import platform
import time
from statistics import median

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .boxes import make_anchor_grid
from .ops import (ConvSpec, OffsetField, conv_forward, deform_conv_forward, flop_count,
                  roiconv_offsets)
from .tensor import Rng

OPS = ("conv", "deform_conv", "roiconv")


def _time_interleaved(fns: dict, iterations: int, warmup: int) -> dict:
    """Median seconds per call; ops take turns so load drift hits all alike."""
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    ts = {name: [] for name in fns}
    for _ in range(iterations):
        for name, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            ts[name].append(time.perf_counter() - t0)
    return {name: median(v) for name, v in ts.items()}


def run_bench(kernels=(3, 5, 7), channels: int = 256, spatial: int = 8, stride: float = 8.0,
              iterations: int = 100, warmup: int = 10, seed: int = 0,
              dtype=np.float64) -> dict:
    """Median forward times and FLOP counts per kernel size.

    Both deformable arms sample the same anchor-aligned locations. The
    learned arm gets them precomputed (its 1x1 offset generator is a separate
    layer); RoIConv generates them from the anchors inside the timed call, so
    the ratio isolates the cost of offset generation.
    """
    rng = Rng(seed)
    anchors = make_anchor_grid(spatial, spatial, stride, 4.0, 2.0).boxes
    timings, flops = [], []
    with threadpool_limits(limits=1):
        for k in kernels:
            spec = ConvSpec.random(rng, channels, channels, k, k)
            spec = ConvSpec.from_weights(spec.weights.astype(dtype), spec.bias.astype(dtype),
                                         (k, k))
            x = rng.normal(size=(channels, spatial, spatial)).astype(dtype)
            learned = OffsetField(roiconv_offsets(anchors, spec, stride).tensor.copy())
            fns = {
                "conv": lambda: conv_forward(x, spec),
                "deform_conv": lambda: deform_conv_forward(x, spec, learned),
                "roiconv": lambda: deform_conv_forward(
                    x, spec, roiconv_offsets(anchors, spec, stride)),
            }
            row = {"kernel": k, **_time_interleaved(fns, iterations, warmup)}
            row["ratio_roiconv_deform"] = row["roiconv"] / row["deform_conv"]
            timings.append(row)
            for op in OPS:
                flops.append({"kernel": k, "op": op,
                              "sampling_macs": flop_count(op, spec, spatial, spatial),
                              "offset_macs": flop_count(op, spec, spatial, spatial, True)
                              - flop_count(op, spec, spatial, spatial)})
    monotonic = all(a[op] < b[op] for a, b in zip(timings, timings[1:]) for op in OPS)
    return {
        "timings": timings,
        "flops": flops,
        "max_ratio": max(r["ratio_roiconv_deform"] for r in timings),
        "monotonic": monotonic,
        "build": {"python": platform.python_version(), "numpy": np.__version__,
                  "mode": "optimized (numpy BLAS)", "threads": 1,
                  "blas": [i.get("internal_api") for i in threadpool_info()]},
        "settings": {"kernels": list(kernels), "channels": channels, "spatial": spatial,
                     "iterations": iterations, "warmup": warmup,
                     "dtype": np.dtype(dtype).name},
    }
