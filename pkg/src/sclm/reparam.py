"""Kernel algebra that collapses a multi-branch estimator into one 3x3 conv."""

from __future__ import annotations

import numpy as np

from .glle import CHANNELS, AvgPool, Branch, BranchModel, FusedModel, Topology
from .local_adapt import CurveParams
from .tensor import BNParams, ConvKernel


def fuse_bn(k, p):
    """Fold inference-mode batch norm into the preceding convolution."""
    if k.c_out != p.channels:
        raise ValueError(f"kernel has {k.c_out} outputs but BN has {p.channels} channels")
    p.check()
    scale = p.gamma / p.sigma
    weight = k.weight * scale[:, None, None, None]
    bias = (k.bias - p.mu) * scale + p.beta
    return ConvKernel(weight, bias)


def fuse_sequential(k1, k2):
    """Merge a 1x1 conv followed by any conv into a single conv of ``k2``'s size.

    The 1x1 stage is a channel-mixing matrix, so the merged weight is the
    per-tap product ``k2[:, :, u, v] @ k1[:, :, 0, 0]`` and the 1x1 bias is
    pushed through every tap of ``k2``.
    """
    if k1.size != (1, 1):
        raise ValueError(f"first kernel must be 1x1, got {k1.size}")
    if k1.c_out != k2.c_in:
        raise ValueError(f"channel mismatch: first kernel emits {k1.c_out}, second expects {k2.c_in}")
    mix = k1.weight[:, :, 0, 0]
    weight = np.einsum("omuv,mi->oiuv", k2.weight, mix)
    bias = k2.bias + np.einsum("omuv,m->o", k2.weight, k1.bias)
    return ConvKernel(weight, bias)


def avgpool_to_kernel(c, k=3, dtype=np.float64):
    """Average pooling over ``k x k`` as a full conv kernel (1/k^2 on the channel diagonal)."""
    weight = np.zeros((c, c, k, k), dtype=dtype)
    for i in range(c):
        weight[i, i] = 1.0 / (k * k)
    return ConvKernel(weight, np.zeros(c, dtype=dtype))


def pad_to_3x3(k):
    """Zero-pad a 1x1, 1x3 or 3x1 kernel around its centre to 3x3."""
    kh, kw = k.size
    if (kh, kw) == (3, 3):
        return k
    top, left = (3 - kh) // 2, (3 - kw) // 2
    weight = np.zeros((k.c_out, k.c_in, 3, 3), dtype=k.weight.dtype)
    weight[:, :, top: top + kh, left: left + kw] = k.weight
    return ConvKernel(weight, k.bias.copy())


def fuse_parallel(ks):
    """Sum same-shaped kernels and biases."""
    ks = list(ks)
    if not ks:
        raise ValueError("nothing to fuse")
    shape = ks[0].weight.shape
    for k in ks[1:]:
        if k.weight.shape != shape:
            raise ValueError(f"parallel kernels must share a shape, got {shape} and {k.weight.shape}")
    return ConvKernel(sum(k.weight for k in ks), sum(k.bias for k in ks))


def dirac_kernel(c, size=3, dtype=np.float64):
    weight = np.zeros((c, c, size, size), dtype=dtype)
    for i in range(c):
        weight[i, i, size // 2, size // 2] = 1.0
    return ConvKernel(weight, np.zeros(c, dtype=dtype))


def fold_residual(k):
    """``conv(x, fold_residual(k)) == conv(x, k) + x``."""
    if k.c_in != k.c_out:
        raise ValueError("a residual needs matching input and output channels")
    kh, kw = k.size
    return ConvKernel(k.weight + dirac_kernel(k.c_in, kh, k.weight.dtype).weight, k.bias.copy())


def collapse_branch(br):
    """Equivalent 3x3 kernel of a single branch, batch norm included."""
    kernel = None
    for stage in br.stages:
        if isinstance(stage, AvgPool):
            stage = avgpool_to_kernel(CHANNELS, stage.k, br.bn.mu.dtype)
        kernel = stage if kernel is None else fuse_sequential(kernel, stage)
    return pad_to_3x3(fuse_bn(kernel, br.bn))


def collapse(m, curve=None, dtype=np.float32, meta=None):
    """Fold a trained branch model (and its curve) into the 87-scalar inference model.

    Arithmetic runs in the model's own precision; the result is cast to
    ``dtype`` at the end.
    """
    if not isinstance(m, BranchModel):
        raise TypeError(f"expected a BranchModel, got {type(m).__name__}")
    kernel = fold_residual(fuse_parallel(collapse_branch(br) for br in m.branches))
    curve = curve if curve is not None else CurveParams.initial()
    out = FusedModel(kernel.astype(dtype), curve, dict(meta or {}))
    out.meta.setdefault("topology", m.topology.value)
    return out


def as_branch_model(fused):
    """Re-express a fused model as a one-branch plain model (identity BN)."""
    k = fused.kernel.astype(np.float64)
    weight = k.weight - dirac_kernel(CHANNELS, 3).weight
    bn = BNParams(np.zeros(CHANNELS), np.ones(CHANNELS), np.ones(CHANNELS), np.zeros(CHANNELS), eps=0.0)
    return BranchModel(Topology.PLAIN, [Branch([ConvKernel(weight, k.bias)], bn)])
