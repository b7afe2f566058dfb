"""Dense NCHW tensor arithmetic used by every other module.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Convolution is cross-correlation (no kernel flip), zero padded.
Production paths run in float32; every function here is dtype-generic so
the same code doubles as the float64 twin used by gradient checks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _check_nchw(x, name="x"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-d (n, c, h, w), got shape {x.shape}")


def ensure_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


@dataclass
class ConvKernel:
    """Convolution weights ``[c_out, c_in, k_h, k_w]`` plus per-output bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4:
            raise ValueError(f"kernel weight must be 4-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}"
            )
        if self.weight.shape[2] not in (1, 3) or self.weight.shape[3] not in (1, 3):
            raise ValueError(f"kernel spatial size must be 1 or 3, got {self.weight.shape[2:]}")
        ensure_finite(self.weight, "kernel weight")
        ensure_finite(self.bias, "kernel bias")

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def size(self):
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def num_params(self):
        return self.weight.size + self.bias.size

    def astype(self, dtype):
        return ConvKernel(self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self):
        return ConvKernel(self.weight.copy(), self.bias.copy())


@dataclass
class BNParams:
    """Per-channel batch-norm state.

    ``sigma`` is the running standard deviation already including ``eps``,
    i.e. ``sqrt(running_var + eps)``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        for name in ("mu", "sigma", "gamma", "beta"):
            setattr(self, name, np.asarray(getattr(self, name)))
        shapes = {self.mu.shape, self.sigma.shape, self.gamma.shape, self.beta.shape}
        if len(shapes) != 1 or self.mu.ndim != 1:
            raise ValueError(f"BN arrays must share one 1-d shape, got {sorted(shapes)}")

    @classmethod
    def identity(cls, c, dtype=np.float64, eps=BN_EPS):
        """Fresh statistics: mean 0, variance 1, gamma 1, beta 0."""
        return cls(
            mu=np.zeros(c, dtype),
            sigma=np.full(c, np.sqrt(1.0 + eps), dtype),
            gamma=np.ones(c, dtype),
            beta=np.zeros(c, dtype),
            eps=eps,
        )

    @property
    def channels(self):
        return self.mu.shape[0]

    @property
    def num_learnable(self):
        return self.gamma.size + self.beta.size

    def check(self):
        if np.any(~(self.sigma > 0)):
            raise ValueError("BN sigma must be strictly positive (were statistics populated?)")

    def astype(self, dtype):
        return BNParams(
            self.mu.astype(dtype), self.sigma.astype(dtype),
            self.gamma.astype(dtype), self.beta.astype(dtype), self.eps,
        )

    def copy(self):
        return self.astype(self.mu.dtype)


def _row_chunks(n_rows, workers):
    workers = max(1, min(int(workers), n_rows))
    bounds = np.linspace(0, n_rows, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunks(fn, n_rows, workers):
    chunks = _row_chunks(n_rows, workers)
    if len(chunks) == 1:
        fn(*chunks[0])
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(lambda c: fn(*c), chunks))


def conv2d(x, k, stride=1, padding=0, workers=1):
    """Zero-padded 2-d cross-correlation.

    ``padding`` is an int or an ``(pad_h, pad_w)`` pair. With ``workers > 1``
    output rows are split across threads; every output element is computed by
    the same sequence of operations, so results are bitwise identical to the
    sequential path.
    """
    x = np.asarray(x)
    _check_nchw(x)
    if x.shape[1] != k.c_in:
        raise ValueError(f"input has {x.shape[1]} channels but kernel expects {k.c_in}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ph, pw = _pair(padding)
    kh, kw = k.size
    n, _, h, w = x.shape
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph},{pw}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dtype = np.result_type(x.dtype, k.weight.dtype)
    weight = k.weight.astype(dtype, copy=False)
    bias = k.bias.astype(dtype, copy=False)
    out = np.empty((n, k.c_out, ho, wo), dtype=dtype)

    def run(r0, r1):
        # scalar multiply-accumulate per tap: fixed summation order per element
        tmp = np.empty((n, r1 - r0, wo), dtype=dtype)
        for o in range(k.c_out):
            acc = out[:, o, r0:r1]
            acc[...] = bias[o]
            for i in range(k.c_in):
                for u in range(kh):
                    for v in range(kw):
                        patch = xp[:, i, u + r0 * stride: u + (r1 - 1) * stride + 1: stride,
                                   v: v + (wo - 1) * stride + 1: stride]
                        np.multiply(patch, weight[o, i, u, v], out=tmp)
                        acc += tmp

    _run_chunks(run, ho, workers)
    return ensure_finite(out, "conv2d output")


def batch_norm(x, p, mode="infer", momentum=BN_MOMENTUM, update_stats=True):
    """Per-channel normalization ``(x - mu) * gamma / sigma + beta``.

    In ``"infer"`` mode the stored running statistics are used. In
    ``"train"`` mode the batch mean and biased batch variance are used, and
    (unless ``update_stats`` is false) ``p.mu`` / ``p.sigma`` are updated in
    place by an exponential moving average with the unbiased variance.
    """
    x = np.asarray(x)
    _check_nchw(x)
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels but BN has {p.channels}")
    if mode == "infer":
        p.check()
        scale = (p.gamma / p.sigma)[None, :, None, None]
        out = (x - p.mu[None, :, None, None]) * scale + p.beta[None, :, None, None]
        return ensure_finite(out, "batch_norm output")
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    axes = (0, 2, 3)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    std = np.sqrt(var + p.eps)
    out = (x - mean[None, :, None, None]) / std[None, :, None, None]
    out = out * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    if update_stats:
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        running_var = (1 - momentum) * (p.sigma**2 - p.eps) + momentum * unbiased
        p.mu = ((1 - momentum) * p.mu + momentum * mean).astype(p.mu.dtype)
        p.sigma = np.sqrt(np.maximum(running_var, 0.0) + p.eps).astype(p.sigma.dtype)
    return ensure_finite(out, "batch_norm output")


def avg_pool(x, k, stride=1, padding=0):
    """Average pooling with zero padding counted in the divisor."""
    x = np.asarray(x)
    _check_nchw(x)
    if k < 1 or stride < 1:
        raise ValueError("pool size and stride must be >= 1")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    n, c, h, w = xp.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            acc += xp[:, :, u: u + (ho - 1) * stride + 1: stride, v: v + (wo - 1) * stride + 1: stride]
    return ensure_finite(acc / (k * k), "avg_pool output")


def max_pool_same(x, k=7):
    """Stride-1 max pooling that keeps the spatial size (edge-replicated border)."""
    x = np.asarray(x)
    _check_nchw(x)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"max_pool_same needs an odd window, got {k}")
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    # max is separable: rows then columns
    out = sliding_window_view(xp, k, axis=2).max(axis=-1)
    out = sliding_window_view(out, k, axis=3).max(axis=-1)
    return ensure_finite(np.ascontiguousarray(out), "max_pool_same output")


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp(x, lo=0.0, hi=1.0):
    return np.clip(x, lo, hi)


def safe_div(num, den, eps):
    """``num / max(den, eps)``."""
    return np.asarray(num) / np.maximum(den, eps)


def add(a, b):
    return np.add(a, b)


def sub(a, b):
    return np.subtract(a, b)


def mul(a, b):
    return np.multiply(a, b)


def channel_broadcast(m, channels):
    """Repeat a single-channel ``(n, 1, h, w)`` map over ``channels``."""
    m = np.asarray(m)
    if m.shape[1] != 1:
        raise ValueError(f"expected a single-channel map, got {m.shape[1]} channels")
    return np.broadcast_to(m, (m.shape[0], channels) + m.shape[2:])
