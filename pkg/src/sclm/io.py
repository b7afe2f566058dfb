"""Images, model files, synthetic training pairs and dataset statistics."""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .glle import AvgPool, Branch, BranchModel, FusedModel
from .local_adapt import CurveParams, rgb_to_y
from .tensor import BNParams, ConvKernel

FORMAT_VERSION = 1
IMAGE_SUFFIXES = {".png", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# --- images -------------------------------------------------------------------

def load_image(path):
    """Read an image as a float32 ``(3, h, w)`` array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def to_uint8(t):
    t = np.asarray(t)
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError("save one image at a time")
        t = t[0]
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {t.shape}")
    return np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(path, t):
    """Write PNG or binary PPM depending on the suffix (round to nearest level)."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported output format {path.suffix!r}; use .png or .ppm")
    Image.fromarray(to_uint8(t), mode="RGB").save(path, format=fmt)


def list_images(directory):
    """Image files directly inside ``directory``, sorted by name."""
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def sample_photos():
    """Free photographs bundled with scikit-image, as ``(3, h, w)`` float arrays.

    Returns ``(train, held_out)``: astronaut, coffee and rocket for training,
    chelsea (never seen in training) for validation.
    """
    import skimage.data

    def grab(name):
        return np.ascontiguousarray(getattr(skimage.data, name)()[..., :3].transpose(2, 0, 1) / 255.0)

    return [grab(n) for n in ("astronaut", "coffee", "rocket")], [grab("chelsea")]


# --- synthetic low-light pairs --------------------------------------------------

@dataclass
class SynthConfig:
    """Degradation model: ``low = clamp(img * 2**ev) ** (1 + jitter) (+ noise)``.

    ``ev`` is drawn from ``exposure_tiers``, ``jitter`` uniformly from
    ``[-gamma_jitter, gamma_jitter]``.
    """

    exposure_tiers: tuple = (-1.5, -1.0)
    gamma_jitter: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        self.exposure_tiers = tuple(float(e) for e in self.exposure_tiers)
        if not self.exposure_tiers:
            raise ValueError("need at least one exposure tier")
        if any(e > 0 for e in self.exposure_tiers):
            raise ValueError("exposure tiers must be <= 0 EV (no overexposed inputs)")
        if not 0 <= self.gamma_jitter < 1:
            raise ValueError("gamma_jitter must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def synth_pair(img, cfg=None, seed=None):
    """Degrade a clean ``(3, h, w)`` image into a ``(low, target)`` pair."""
    cfg = cfg or SynthConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    img = np.asarray(img)
    ev = cfg.exposure_tiers[int(rng.integers(len(cfg.exposure_tiers)))]
    jitter = rng.uniform(-cfg.gamma_jitter, cfg.gamma_jitter) if cfg.gamma_jitter else 0.0
    low = np.clip(img * 2.0**ev, 0.0, 1.0) ** (1.0 + jitter)
    if cfg.noise:
        low = np.clip(low + rng.normal(0.0, cfg.noise, low.shape), 0.0, 1.0)
    return low.astype(img.dtype), img.copy()


def make_pairs(images, count, size, cfg=None, seed=0):
    """``count`` synthetic pairs from random ``size x size`` crops, cycling through ``images``."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        img = images[i % len(images)]
        h, w = img.shape[1:]
        if size > min(h, w):
            raise ValueError(f"crop {size} larger than image {h}x{w}")
        a = int(rng.integers(h - size + 1))
        b = int(rng.integers(w - size + 1))
        pairs.append(synth_pair(img[:, a: a + size, b: b + size], cfg, rng))
    return pairs


def mean_luma(img):
    """Mean BT.601 luma of a ``(3, h, w)`` image on the 0-255 scale."""
    return float(rgb_to_y(np.asarray(img, dtype=np.float64)[None]).mean() * 255.0)


def dataset_stats(directories):
    """Rows of ``(directory, images, mean_y)``; each image weighs equally."""
    rows = []
    for d in directories:
        files = list_images(d)
        if not files:
            raise ValueError(f"no images found in {d}")
        rows.append((str(d), len(files), float(np.mean([mean_luma(load_image(f)) for f in files]))))
    return rows


# --- model files --------------------------------------------------------------------

def _enc(a):
    a = np.asarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": le.dtype.str, "shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii")}


def _dec(d):
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return a.astype(a.dtype.newbyteorder("="))


def _curve_dict(c):
    return {"alpha": c.alpha, "beta": c.beta, "gamma": c.gamma}


def model_to_dict(m, curve=None, meta=None):
    if isinstance(m, FusedModel):
        k = m.kernel.astype(np.float32)
        return {
            "format_version": FORMAT_VERSION,
            "kind": "fused",
            "topology": m.meta.get("topology"),
            "kernel": {"weight": _enc(k.weight), "bias": _enc(k.bias)},
            "curve": _curve_dict(m.curve),
            "meta": {**m.meta, **(meta or {})},
        }
    if isinstance(m, BranchModel):
        branches = []
        for br in m.branches:
            stages = []
            for s in br.stages:
                if isinstance(s, AvgPool):
                    stages.append({"type": "avgpool", "k": s.k})
                else:
                    stages.append({"type": "conv", "weight": _enc(s.weight), "bias": _enc(s.bias)})
            bn = br.bn
            branches.append({"stages": stages, "bn": {
                "mu": _enc(bn.mu), "sigma": _enc(bn.sigma), "gamma": _enc(bn.gamma),
                "beta": _enc(bn.beta), "eps": bn.eps}})
        return {
            "format_version": FORMAT_VERSION,
            "kind": "branch",
            "topology": m.topology.value,
            "branches": branches,
            "curve": _curve_dict(curve or CurveParams.initial()),
            "meta": dict(meta or {}),
        }
    raise TypeError(f"cannot serialise {type(m).__name__}")


def model_from_dict(d):
    """Inverse of ``model_to_dict``: a ``FusedModel`` or ``(BranchModel, CurveParams, meta)``."""
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
    curve = CurveParams(**d["curve"])
    if d["kind"] == "fused":
        k = ConvKernel(_dec(d["kernel"]["weight"]), _dec(d["kernel"]["bias"]))
        meta = dict(d.get("meta", {}))
        if d.get("topology") is not None:
            meta["topology"] = d["topology"]
        m = FusedModel(k, curve, meta)
        if m.num_params() != 87:
            raise ValueError(f"fused model must hold 87 scalars, found {m.num_params()}")
        return m
    if d["kind"] == "branch":
        branches = []
        for b in d["branches"]:
            stages = [AvgPool(s["k"]) if s["type"] == "avgpool" else ConvKernel(_dec(s["weight"]), _dec(s["bias"]))
                      for s in b["stages"]]
            bn = b["bn"]
            branches.append(Branch(stages, BNParams(_dec(bn["mu"]), _dec(bn["sigma"]), _dec(bn["gamma"]),
                                                    _dec(bn["beta"]), bn["eps"])))
        return BranchModel(d["topology"], branches), curve, dict(d.get("meta", {}))
    raise ValueError(f"unknown model kind {d['kind']!r}")


def save_model(path, m, curve=None, meta=None):
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(model_to_dict(m, curve, meta), indent=1))
    os.replace(tmp, path)


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
