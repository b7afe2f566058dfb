"""Dual-pipeline verification: fusion equivalence and gradient checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .glle import Topology, build_topology, estimate_illumination, illumination_logits
from .reparam import collapse
from .training import gradient_check, random_check_point, relative_error

FUSION_TOL = {np.float32: 1e-4, np.float64: 1e-10}
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def ok(self):
        return bool(self.value < self.tol)

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


def randomize_stats(model, rng):
    """Give every batch norm plausible trained statistics and affine terms."""
    for br in model.branches:
        c = br.bn.channels
        dt = br.bn.mu.dtype
        br.bn.mu = rng.normal(0.0, 0.3, c).astype(dt)
        br.bn.sigma = rng.uniform(0.5, 2.0, c).astype(dt)
        br.bn.gamma = rng.uniform(0.5, 1.5, c).astype(dt)
        br.bn.beta = rng.normal(0.0, 0.2, c).astype(dt)
    return model


def trained_like(topology, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    model = build_topology(topology, seed=int(rng.integers(2**31)), dtype=dtype)
    return randomize_stats(model, rng)


def fusion_discrepancy(model, probes=100, size=32, dtype=np.float32, seed=0, fused=None):
    """Max |multi-branch - fused| illumination over random probe images.

    Both pipelines run in ``dtype``; the fused kernel is computed from the
    float64 branch parameters.
    """
    rng = np.random.default_rng(seed)
    branch = model.astype(dtype)
    fused = fused if fused is not None else collapse(model.astype(np.float64), dtype=dtype)
    worst = 0.0
    for _ in range(probes):
        x = rng.random((1, 3, size, size)).astype(dtype)
        a = estimate_illumination(x, branch)
        b = estimate_illumination(x, fused)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def logit_discrepancy(model, probes=100, size=32, dtype=np.float32, seed=0):
    """Like ``fusion_discrepancy`` but before the sigmoid (no saturation masking)."""
    rng = np.random.default_rng(seed)
    branch = model.astype(dtype)
    fused = collapse(model.astype(np.float64), dtype=dtype)
    worst = 0.0
    for _ in range(probes):
        x = rng.random((1, 3, size, size)).astype(dtype)
        worst = max(worst, float(np.abs(illumination_logits(x, branch) - illumination_logits(x, fused)).max()))
    return worst


def fusion_suite(topologies=tuple(Topology), probes=100, size=32, seed=0):
    out = []
    for t in topologies:
        t = Topology.parse(t)
        model = trained_like(t, seed=seed)
        for dtype in (np.float32, np.float64):
            d = logit_discrepancy(model, probes, size, dtype, seed)
            bits = 32 if dtype is np.float32 else 64
            out.append(CheckResult(f"fusion {t.value} float{bits}", d, FUSION_TOL[dtype]))
    return out


def worst_gradient_error(topology, seed):
    model, curve, x, target = random_check_point(topology, seed)
    res = gradient_check(model, curve, x, target)
    return max(float(relative_error(a, n).max()) for a, n in res.values())


def gradient_suite(topology="db", points=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = max(worst_gradient_error(topology, int(rng.integers(2**31))) for _ in range(points))
    return [CheckResult(f"gradients {Topology.parse(topology).value} ({points} points)", worst, GRAD_TOL)]
