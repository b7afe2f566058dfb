"""Parameter and FLOP accounting, and wall-clock benchmarking."""

from __future__ import annotations

import math
import os
import time

import numpy as np

from .glle import AvgPool, BranchModel, FusedModel, illumination_logits
from .local_adapt import enhance


def default_workers():
    """Worker count: ``SCLM_THREADS`` if set, capped by the CPU count."""
    cpus = os.cpu_count() or 1
    env = os.environ.get("SCLM_THREADS")
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            raise ValueError(f"SCLM_THREADS must be an integer, got {env!r}") from None
    return cpus


def count_params(m):
    if isinstance(m, FusedModel):
        return m.num_params()
    if isinstance(m, BranchModel):
        return m.num_params()
    raise TypeError(f"cannot count parameters of {type(m).__name__}")


def conv_macs(m, h, w):
    """Multiply-accumulates of the convolutions for one ``h x w`` image."""
    if isinstance(m, FusedModel):
        c_out, c_in, kh, kw = m.kernel.weight.shape
        return h * w * c_out * c_in * kh * kw
    total = 0
    for br in m.branches:
        for s in br.stages:
            if isinstance(s, AvgPool):
                total += h * w * 3 * s.k * s.k
            else:
                total += h * w * s.weight.size
    return total


def pointwise_ops(h, w, pool_k=7):
    """Rough per-pixel operation count of everything after the convolution.

    sigmoid (3 ch x 4), divide + clamp (3 x 3), luma (5), deviation and
    normalisation (3), separable max-pool (2(k-1)), curve (4), gain multiply
    + clamp (3 x 3).
    """
    return h * w * (12 + 9 + 5 + 3 + 2 * (pool_k - 1) + 4 + 9)


def count_flops(m, h, w, convention="1x"):
    """GFLOPs of the convolution; ``"1x"`` counts one FLOP per MAC, ``"2x"`` two."""
    per_mac = {"1x": 1, "2x": 2}.get(convention)
    if per_mac is None:
        raise ValueError(f"convention must be '1x' or '2x', got {convention!r}")
    return conv_macs(m, h, w) * per_mac / 1e9


def round_sig(x, digits=2):
    if x == 0:
        return 0.0
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


def time_call(fn, repeats=20, warmup=2):
    """Median and 95th-percentile wall-clock seconds of ``fn()``."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), float(np.percentile(times, 95))


def bench(fused, branch=None, h=1080, w=1920, repeats=20, warmup=2, threads=None, seed=0):
    """Time the fused estimator, the multi-branch estimator and the full pipeline.

    Returns rows ``(path, threads, repeats, median_ms, p95_ms)``. One row per
    path at one thread, and again at ``threads`` workers when that exceeds one.
    """
    x = np.random.default_rng(seed).random((1, 3, h, w), dtype=np.float32)
    threads = default_workers() if threads is None else threads
    paths = [("fused_conv", lambda n: illumination_logits(x, fused, workers=n))]
    if branch is not None:
        branch32 = branch.astype(np.float32)
        paths.append(("branch_forward", lambda n: illumination_logits(x, branch32, workers=n)))
    paths.append(("enhance", lambda n: enhance(x, fused, workers=n)))
    rows = []
    for n in sorted({1, threads}):
        for name, fn in paths:
            med, p95 = time_call(lambda: fn(n), repeats, warmup)
            rows.append((name, n, repeats, med * 1e3, p95 * 1e3))
    return rows
