"""Global low-light enhancement: illumination estimation and Retinex division.

At training time the illumination estimator is a small multi-branch block;
every branch maps RGB to RGB and ends in its own batch norm, and the block
output is ``sigmoid(sum(branches) + x)``. After fusion the same function is
one 3x3 convolution followed by a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .tensor import (
    BNParams,
    ConvKernel,
    avg_pool,
    batch_norm,
    clamp,
    conv2d,
    ensure_finite,
    safe_div,
    sigmoid,
)

if TYPE_CHECKING:
    from .local_adapt import CurveParams

CHANNELS = 3
DIVIDE_EPS = 1e-4


class Topology(str, Enum):
    PLAIN = "plain"
    DIVERSE_BRANCH = "db"
    ASYMMETRIC_BLOCK = "ab"
    TRIPLE_DUPLICATE = "td"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {
            "plain": cls.PLAIN,
            "db": cls.DIVERSE_BRANCH, "diverse_branch": cls.DIVERSE_BRANCH,
            "ab": cls.ASYMMETRIC_BLOCK, "asymmetric_block": cls.ASYMMETRIC_BLOCK,
            "td": cls.TRIPLE_DUPLICATE, "triple_duplicate": cls.TRIPLE_DUPLICATE,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown topology {value!r}; expected one of plain, db, ab, td") from None


@dataclass(frozen=True)
class AvgPool:
    """Stride-1 average-pooling stage inside a branch."""

    k: int = 3

    @property
    def size(self):
        return self.k, self.k


@dataclass
class Branch:
    """A chain of stages followed by batch norm.

    Every stage but the last must be a 1x1 convolution. The last stage may be
    spatial; its border is padded with the prefix's response to a zero input
    (the 1x1 bias), which is what the fused kernel sees under zero padding of
    the original image.
    """

    stages: list
    bn: BNParams

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a branch needs at least one stage")
        for s in self.stages[:-1]:
            if not isinstance(s, ConvKernel) or s.size != (1, 1):
                raise ValueError("only 1x1 convolutions may precede the last stage of a branch")
        if len(self.stages) > 2:
            raise ValueError("branches hold at most a 1x1 prefix and one final stage")
        last = self.stages[-1]
        if isinstance(last, ConvKernel) and last.c_out != self.bn.channels:
            raise ValueError("branch output channels do not match its batch norm")

    @property
    def prefix(self):
        return self.stages[0] if len(self.stages) == 2 else None

    @property
    def last(self):
        return self.stages[-1]

    @property
    def convs(self):
        return [s for s in self.stages if isinstance(s, ConvKernel)]


@dataclass
class BranchModel:
    topology: Topology
    branches: list
    residual: bool = True

    def __post_init__(self):
        self.topology = Topology.parse(self.topology)
        if not self.residual:
            raise ValueError("the residual connection is always on")

    def num_params(self, include_running_stats=True):
        """Scalar count before fusion (conv weights and biases plus BN state)."""
        total = 0
        for br in self.branches:
            total += sum(k.num_params for k in br.convs)
            total += 4 * br.bn.channels if include_running_stats else br.bn.num_learnable
        return total

    def copy(self):
        return BranchModel(
            self.topology,
            [Branch([s.copy() if isinstance(s, ConvKernel) else s for s in br.stages], br.bn.copy())
             for br in self.branches],
            self.residual,
        )

    def astype(self, dtype):
        return BranchModel(
            self.topology,
            [Branch([s.astype(dtype) if isinstance(s, ConvKernel) else s for s in br.stages],
                    br.bn.astype(dtype))
             for br in self.branches],
            self.residual,
        )


@dataclass
class FusedModel:
    """Inference model: one 3->3 3x3 kernel (residual folded in) and the curve."""

    kernel: ConvKernel
    curve: CurveParams
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kernel.weight.shape != (CHANNELS, CHANNELS, 3, 3):
            raise ValueError(f"fused kernel must be 3x3x3x3, got {self.kernel.weight.shape}")

    def num_params(self):
        return self.kernel.num_params + 3


def _init_kernel(rng, kh, kw, dtype):
    # fan-in scaled uniform, as in common conv layer defaults
    bound = 1.0 / np.sqrt(CHANNELS * kh * kw)
    w = rng.uniform(-bound, bound, size=(CHANNELS, CHANNELS, kh, kw)).astype(dtype)
    b = rng.uniform(-bound, bound, size=CHANNELS).astype(dtype)
    return ConvKernel(w, b)


def build_topology(topology, seed=0, pool_k=3, dtype=np.float64):
    """Fresh multi-branch illumination estimator with seeded random weights.

    * plain: 3x3
    * db: 3x3 | 1x1 | 1x1 -> 3x3 | 1x1 -> avg-pool
    * ab: 3x3 | 1x3 | 3x1
    * td: 3x3 | 3x3 | 3x3
    """
    topology = Topology.parse(topology)
    rng = np.random.default_rng(seed)

    def k(kh, kw):
        return _init_kernel(rng, kh, kw, dtype)

    if topology is Topology.PLAIN:
        chains = [[k(3, 3)]]
    elif topology is Topology.DIVERSE_BRANCH:
        chains = [[k(3, 3)], [k(1, 1)], [k(1, 1), k(3, 3)], [k(1, 1), AvgPool(pool_k)]]
    elif topology is Topology.ASYMMETRIC_BLOCK:
        chains = [[k(3, 3)], [k(1, 3)], [k(3, 1)]]
    else:
        chains = [[k(3, 3)], [k(3, 3)], [k(3, 3)]]
    return BranchModel(topology, [Branch(c, BNParams.identity(CHANNELS, dtype)) for c in chains])


def pad_with_value(t, value, ph, pw):
    """Pad an NCHW tensor spatially with a per-channel constant."""
    v = np.asarray(value, dtype=t.dtype)[None, :, None, None]
    return np.pad(t - v, ((0, 0), (0, 0), (ph, ph), (pw, pw))) + v


def branch_forward(x, br, mode="infer", update_stats=True, workers=1):
    """Output of one branch (after its batch norm) on an NCHW batch."""
    last = br.last
    kh, kw = last.size
    pad = (kh // 2, kw // 2)
    if br.prefix is None:
        if isinstance(last, AvgPool):
            a = avg_pool(x, last.k, 1, pad[0])
        else:
            a = conv2d(x, last, padding=pad, workers=workers)
    else:
        t = conv2d(x, br.prefix, padding=0, workers=workers)
        tp = pad_with_value(t, br.prefix.bias, *pad)
        if isinstance(last, AvgPool):
            a = avg_pool(tp, last.k, 1, 0)
        else:
            a = conv2d(tp, last, padding=0, workers=workers)
    return batch_norm(a, br.bn, mode=mode, update_stats=update_stats)


def illumination_logits(x, m, mode="infer", update_stats=True, workers=1):
    """Pre-sigmoid illumination: ``sum(branches) + x``, or the fused conv."""
    x = np.asarray(x)
    if isinstance(m, FusedModel):
        return conv2d(x, m.kernel, padding=1, workers=workers)
    s = x.astype(np.result_type(x.dtype, m.branches[0].bn.gamma.dtype), copy=True)
    for br in m.branches:
        s += branch_forward(x, br, mode=mode, update_stats=update_stats, workers=workers)
    return s


def _check_image_batch(x):
    if x.ndim != 4 or x.shape[1] != CHANNELS:
        raise ValueError(f"expected an (n, 3, h, w) batch, got shape {x.shape}")
    ensure_finite(x, "input image")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("input image values must lie in [0, 1]")


def estimate_illumination(x, m, mode="infer", update_stats=True, workers=1):
    """Per-pixel, per-channel illumination in (0, 1)."""
    x = np.asarray(x)
    _check_image_batch(x)
    return sigmoid(illumination_logits(x, m, mode=mode, update_stats=update_stats, workers=workers))


def retinex_divide(x, illum, eps=DIVIDE_EPS):
    """Coarse enhancement ``clamp(x / max(illum, eps), 0, 1)``."""
    x = np.asarray(x)
    illum = np.asarray(illum)
    if x.shape != illum.shape:
        raise ValueError(f"image {x.shape} and illumination {illum.shape} shapes differ")
    return clamp(safe_div(x, illum, eps), 0.0, 1.0)
