"""Local adaptation: a per-pixel gain computed from the input's luminance.

The gain map depends only on the input image. A shared quadratic turns the
normalized, max-pooled luminance deviation into a multiplier that lifts
relatively dark regions and tames relatively bright ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import channel_broadcast, clamp, max_pool_same

# BT.601 full-range luma weights
Y_WEIGHTS = (0.299, 0.587, 0.114)
DEFAULT_POOL_K = 7


@dataclass(frozen=True)
class CurveParams:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        # math.isfinite also accepts Fraction/Decimal, which allows exact evaluation
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.gamma)):
            raise ValueError(f"curve parameters must be finite, got {self}")

    @classmethod
    def initial(cls):
        """``C(x) = 0.6 x^2 - 1.3 x + 1.5``: C(0)=1.5, C(0.5)=1, C(1)=0.8."""
        return cls(0.6, -1.3, 1.5)

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 1.0)

    def as_array(self, dtype=np.float64):
        return np.array([self.alpha, self.beta, self.gamma], dtype=dtype)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.size != 3:
            raise ValueError(f"curve needs exactly 3 values, got {a.size}")
        return cls(float(a[0]), float(a[1]), float(a[2]))


def rgb_to_y(x):
    """Luma of an ``(n, 3, h, w)`` RGB batch, shape ``(n, 1, h, w)``."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an RGB batch (n, 3, h, w), got {x.shape}")
    r, g, b = Y_WEIGHTS
    return r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3]


def lower_median(values):
    flat = np.asarray(values).ravel()
    if flat.size == 0:
        raise ValueError("median of an empty array")
    return np.partition(flat, (flat.size - 1) // 2)[(flat.size - 1) // 2]


def condition_map(y):
    """Deviation of every pixel from its image's (lower) median luma."""
    y = np.asarray(y)
    med = np.array([lower_median(img) for img in y], dtype=y.dtype)
    return y - med.reshape((-1,) + (1,) * (y.ndim - 1))


def normalize_map(m):
    """Per-image min-max scaling to [0, 1]; flat images map to 0.5."""
    m = np.asarray(m)
    out = np.empty_like(m)
    for i, img in enumerate(m):
        lo, hi = img.min(), img.max()
        if hi > lo:
            out[i] = (img - lo) / (hi - lo)
        else:
            out[i] = 0.5
    return out


def smooth_map(m, k=DEFAULT_POOL_K):
    return max_pool_same(m, k)


def adaptation_map(x, pool_k=DEFAULT_POOL_K):
    """Curve input for an RGB batch: luma -> deviation -> normalize -> max-pool."""
    return smooth_map(normalize_map(condition_map(rgb_to_y(x))), pool_k)


def curve_apply(m, p):
    """Per-pixel quadratic ``alpha m^2 + beta m + gamma`` (unclamped)."""
    m = np.asarray(m)
    return p.alpha * m * m + p.beta * m + p.gamma


def fuse_output(coarse, c):
    """Scale every channel of ``coarse`` by the gain map ``c`` and clamp to [0, 1]."""
    coarse = np.asarray(coarse)
    c = np.asarray(c)
    if c.ndim == coarse.ndim and c.shape[1] == 1:
        c = channel_broadcast(c, coarse.shape[1])
    return clamp(c * coarse, 0.0, 1.0)


def enhance(x, model, pool_k=DEFAULT_POOL_K, workers=1):
    """Full inference pipeline for a fused model on an ``(n, 3, h, w)`` batch.

    Global illumination estimate, Retinex division, then a single pass of the
    local adaptation curve.
    """
    from .glle import estimate_illumination, retinex_divide

    x = np.asarray(x)
    illum = estimate_illumination(x, model, workers=workers)
    coarse = retinex_divide(x, illum)
    gain = curve_apply(adaptation_map(x, pool_k), model.curve)
    return fuse_output(coarse, gain)
