"""End-to-end training of the branch model and the curve.

The backward pass is written out by hand for the handful of layers the model
uses; ``gradient_check`` compares it with central finite differences in
float64.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .glle import DIVIDE_EPS, AvgPool, BranchModel, build_topology, pad_with_value
from .local_adapt import DEFAULT_POOL_K, CurveParams, adaptation_map
from .tensor import avg_pool, batch_norm, conv2d, sigmoid

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    crop: int = 64
    batch: int = 4
    augment: bool = True
    topology: str = "db"
    pool_k: int = DEFAULT_POOL_K
    seed: int = 0

    def __post_init__(self):
        if not self.lr_final < self.lr_init:
            raise ValueError("lr_final must be below lr_init")
        if self.steps < 1 or self.batch < 1 or self.crop < 3:
            raise ValueError("steps and batch must be positive and crop at least 3")

    @classmethod
    def full_scale(cls, steps, **kw):
        """The published recipe: 256x256 crops, batch 16."""
        return cls(steps=steps, crop=256, batch=16, **kw)


@dataclass
class GradState:
    """Adam moments, one pair per named parameter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainResult:
    model: BranchModel
    curve: CurveParams
    losses: list
    lrs: list


def l1_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def cosine_lr(step, total, lr_init=2e-4, lr_final=1e-6):
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total))


def named_parameters(model):
    """``(name, array)`` for every learnable array; arrays are the model's own."""
    out = []
    for b, br in enumerate(model.branches):
        for s, stage in enumerate(br.stages):
            if isinstance(stage, AvgPool):
                continue
            out.append((f"b{b}.s{s}.weight", stage.weight))
            out.append((f"b{b}.s{s}.bias", stage.bias))
        out.append((f"b{b}.bn.gamma", br.bn.gamma))
        out.append((f"b{b}.bn.beta", br.bn.beta))
    return out


# --- layer backward passes -------------------------------------------------

def _conv_backward(g, xp, weight):
    """Gradients of a stride-1 valid conv given the padded input ``xp``."""
    _, _, kh, kw = weight.shape
    h, w = g.shape[2:]
    gw = np.empty_like(weight)
    gxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u: u + h, v: v + w]
            gw[:, :, u, v] = np.einsum("nohw,nihw->oi", g, patch)
            gxp[:, :, u: u + h, v: v + w] += np.einsum("oi,nohw->nihw", weight[:, :, u, v], g)
    return gxp, gw, g.sum(axis=(0, 2, 3))


def _avg_pool_backward(g, k, in_shape):
    gx = np.zeros(in_shape, dtype=g.dtype)
    h, w = g.shape[2:]
    for u in range(k):
        for v in range(k):
            gx[:, :, u: u + h, v: v + w] += g
    return gx / (k * k)


def _bn_backward(g, cache, gamma):
    mode, xhat, scale = cache
    axes = (0, 2, 3)
    g_gamma = (g * xhat).sum(axis=axes)
    g_beta = g.sum(axis=axes)
    gxhat = g * gamma[None, :, None, None]
    if mode == "infer":
        return gxhat * scale, g_gamma, g_beta
    # batch statistics depend on the input
    ga = gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
    return ga * scale, g_gamma, g_beta


def _bn_forward(a, bn, mode, update_stats):
    if mode == "infer":
        scale = (1.0 / bn.sigma)[None, :, None, None]
        xhat = (a - bn.mu[None, :, None, None]) * scale
    else:
        mean = a.mean(axis=(0, 2, 3), keepdims=True)
        scale = 1.0 / np.sqrt(a.var(axis=(0, 2, 3), keepdims=True) + bn.eps)
        xhat = (a - mean) * scale
    out = batch_norm(a, bn, mode=mode, update_stats=update_stats)
    return out, (mode, xhat, scale)


def _branch_forward(x, br, mode, update_stats):
    last = br.last
    kh, kw = last.size
    ph, pw = kh // 2, kw // 2
    cache = {}
    if br.prefix is None:
        src = x
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        t = conv2d(x, br.prefix, padding=0)
        cache["t"] = t
        src = t
        xp = pad_with_value(t, br.prefix.bias, ph, pw)
    cache["xp"] = xp
    if isinstance(last, AvgPool):
        a = avg_pool(xp, last.k, 1, 0)
    else:
        a = conv2d(xp, last, padding=0)
    out, cache["bn"] = _bn_forward(a, br.bn, mode, update_stats)
    cache["pad"] = (ph, pw)
    cache["src_shape"] = src.shape
    return out, cache


def _branch_backward(g, x, br, cache, grads, b):
    g_a, g_gamma, g_beta = _bn_backward(g, cache["bn"], br.bn.gamma)
    grads[f"b{b}.bn.gamma"] = g_gamma
    grads[f"b{b}.bn.beta"] = g_beta
    last = br.last
    xp = cache["xp"]
    s_last = len(br.stages) - 1
    if isinstance(last, AvgPool):
        gxp = _avg_pool_backward(g_a, last.k, xp.shape)
    else:
        gxp, gw, gb = _conv_backward(g_a, xp, last.weight)
        grads[f"b{b}.s{s_last}.weight"] = gw
        grads[f"b{b}.s{s_last}.bias"] = gb
    if br.prefix is None:
        return
    ph, pw = cache["pad"]
    h, w = cache["src_shape"][2:]
    g_t = gxp[:, :, ph: ph + h, pw: pw + w]
    # the border is filled with the prefix bias
    g_border = gxp.sum(axis=(0, 2, 3)) - g_t.sum(axis=(0, 2, 3))
    _, gw1, gb1 = _conv_backward(g_t, x, br.prefix.weight)
    grads[f"b{b}.s0.weight"] = gw1
    grads[f"b{b}.s0.bias"] = gb1 + g_border


def _clamp_mask(v, lo=0.0, hi=1.0):
    return ((v >= lo) & (v <= hi)).astype(v.dtype)


def forward(x, model, curve, mode="train", update_stats=False, pool_k=DEFAULT_POOL_K, eps=DIVIDE_EPS,
            adapt=None):
    """Training-graph forward pass; returns the prediction and a backward cache.

    ``curve`` is a length-3 array ``(alpha, beta, gamma)``. ``adapt`` may
    carry a precomputed adaptation map (it depends on ``x`` only).
    """
    x = np.asarray(x)
    s = x.copy()
    branch_caches = []
    for br in model.branches:
        o, c = _branch_forward(x, br, mode, update_stats)
        s += o
        branch_caches.append(c)
    illum = sigmoid(s)
    ratio = x / np.maximum(illum, eps)
    coarse = np.clip(ratio, 0.0, 1.0)
    m = adaptation_map(x, pool_k) if adapt is None else adapt
    gain = curve[0] * m * m + curve[1] * m + curve[2]
    raw = gain * coarse
    pred = np.clip(raw, 0.0, 1.0)
    cache = dict(x=x, branches=branch_caches, illum=illum, ratio=ratio, coarse=coarse,
                 m=m, gain=gain, raw=raw, eps=eps)
    return pred, cache


def backward(g_pred, model, curve, cache):
    """Reverse pass from ``dL/dpred``. Returns ``{name: grad}`` incl. ``"curve"``."""
    x = cache["x"]
    m, gain, coarse, illum = cache["m"], cache["gain"], cache["coarse"], cache["illum"]
    g_raw = g_pred * _clamp_mask(cache["raw"])
    g_gain = (g_raw * coarse).sum(axis=1, keepdims=True)
    grads = {"curve": np.array([(g_gain * m * m).sum(), (g_gain * m).sum(), g_gain.sum()])}
    g_coarse = g_raw * gain
    g_ratio = g_coarse * _clamp_mask(cache["ratio"])
    live = illum > cache["eps"]
    g_illum = np.where(live, -g_ratio * x / np.where(live, illum, 1.0) ** 2, 0.0)
    g_s = g_illum * illum * (1.0 - illum)
    for b, (br, bc) in enumerate(zip(model.branches, cache["branches"])):
        _branch_backward(g_s, x, br, bc, grads, b)
    return grads


def loss_and_grads(x, target, model, curve, mode="train", update_stats=False, pool_k=DEFAULT_POOL_K,
                   adapt=None):
    pred, cache = forward(x, model, curve, mode=mode, update_stats=update_stats, pool_k=pool_k,
                          adapt=adapt)
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss}; pred range [{np.nanmin(pred)}, {np.nanmax(pred)}]"
        )
    grads = backward(np.sign(diff) / diff.size, model, curve, cache)
    return loss, grads, cache


def adam_step(state, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, updating ``params`` arrays in place."""
    state.step += 1
    t = state.step
    for name, p in params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def augment(low, target, rng):
    """Apply one random flip/rot90 combination to both ``(c, h, w)`` images."""
    if rng.random() < 0.5:
        low, target = low[:, :, ::-1], target[:, :, ::-1]
    if rng.random() < 0.5:
        low, target = low[:, ::-1, :], target[:, ::-1, :]
    k = int(rng.integers(4))
    if k:
        low, target = np.rot90(low, k, axes=(1, 2)), np.rot90(target, k, axes=(1, 2))
    return np.ascontiguousarray(low), np.ascontiguousarray(target)


def random_crop(low, target, size, rng):
    h, w = low.shape[1:]
    if size > min(h, w):
        raise ValueError(f"crop {size} exceeds image size {h}x{w}")
    i = int(rng.integers(h - size + 1))
    j = int(rng.integers(w - size + 1))
    return low[:, i: i + size, j: j + size], target[:, i: i + size, j: j + size]


def sample_batch(pairs, cfg, rng):
    lows, targets = [], []
    for idx in rng.integers(len(pairs), size=cfg.batch):
        low, tgt = random_crop(*pairs[idx], cfg.crop, rng)
        if cfg.augment:
            low, tgt = augment(low, tgt, rng)
        lows.append(low)
        targets.append(tgt)
    return np.stack(lows).astype(np.float64), np.stack(targets).astype(np.float64)


def train(pairs, cfg, model=None, loss_log=None):
    """Optimise a branch model and curve on ``(low, target)`` pairs of ``(3, h, w)`` images.

    Deterministic for a given ``cfg.seed``. ``loss_log`` may be a path; one
    ``step,lr,loss`` row is written per step.
    """
    if not pairs:
        raise ValueError("training needs at least one image pair")
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else build_topology(cfg.topology, seed=cfg.seed)
    curve = CurveParams.initial().as_array()
    params = named_parameters(model) + [("curve", curve)]
    state = GradState()
    losses, lrs = [], []
    writer = fh = None
    if loss_log is not None:
        fh = open(loss_log, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
    try:
        for step in range(cfg.steps):
            lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final)
            x, y = sample_batch(pairs, cfg, rng)
            loss, grads, _ = loss_and_grads(x, y, model, curve, mode="train", update_stats=True,
                                            pool_k=cfg.pool_k)
            adam_step(state, params, grads, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            losses.append(loss)
            lrs.append(lr)
            if writer:
                writer.writerow([step, f"{lr:.9g}", f"{loss:.9g}"])
            if step % 200 == 0 or step == cfg.steps - 1:
                log.info("step %d lr %.3g loss %.5f", step, lr, loss)
    finally:
        if fh:
            fh.close()
    return TrainResult(model, CurveParams.from_array(curve), losses, lrs)


def evaluate(pairs, model, curve, pool_k=DEFAULT_POOL_K):
    """Mean L1 loss and mean output / target luma over whole images (inference mode)."""
    from .local_adapt import rgb_to_y

    curve = curve.as_array() if isinstance(curve, CurveParams) else np.asarray(curve)
    losses, out_y, tgt_y = [], [], []
    for low, tgt in pairs:
        pred, _ = forward(low[None].astype(np.float64), model, curve, mode="infer", pool_k=pool_k)
        losses.append(l1_loss(pred[0], tgt))
        out_y.append(float(rgb_to_y(pred).mean()))
        tgt_y.append(float(rgb_to_y(tgt[None]).mean()))
    return float(np.mean(losses)), float(np.mean(out_y)), float(np.mean(tgt_y))


# --- gradient verification --------------------------------------------------

def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def kink_margin(cache, target, pred):
    """Distance of the current point from the nearest non-smooth location."""
    ratio, raw, illum = cache["ratio"], cache["raw"], cache["illum"]
    return float(min(
        np.abs(pred - target).min(),
        np.minimum(np.abs(ratio), np.abs(ratio - 1.0)).min(),
        np.minimum(np.abs(raw), np.abs(raw - 1.0)).min(),
        (illum - cache["eps"]).min(),
    ))


def random_check_point(topology, seed, size=16, margin=1e-3):
    """A random model, curve, input and target with no element near a kink."""
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        model = build_topology(topology, seed=int(rng.integers(2**31)))
        for br in model.branches:
            br.bn.gamma[:] = rng.uniform(0.5, 1.5, 3)
            br.bn.beta[:] = rng.normal(0.0, 0.2, 3)
        curve = CurveParams.initial().as_array() + rng.normal(0.0, 0.1, 3)
        x = rng.uniform(0.05, 0.35, size=(1, 3, size, size))
        pred, cache = forward(x, model, curve)
        # target sits a fixed distance above or below the prediction
        offset = rng.uniform(0.02, 0.1, pred.shape) * rng.choice([-1.0, 1.0], pred.shape)
        target = pred + offset
        if kink_margin(cache, target, pred) > margin:
            return model, curve, x, target
    raise RuntimeError("could not find a kink-free check point")


def gradient_check(model, curve, x, target, h=1e-5, mode="train", pool_k=DEFAULT_POOL_K):
    """Analytic vs central-difference gradients for every learnable scalar.

    Returns ``{name: (analytic, numeric)}``. Runs in float64 and never
    touches the running statistics.
    """
    model = model.astype(np.float64)
    curve = np.array(curve, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    adapt = adaptation_map(x, pool_k)
    _, grads, _ = loss_and_grads(x, target, model, curve, mode=mode, pool_k=pool_k, adapt=adapt)

    def loss():
        pred, _ = forward(x, model, curve, mode=mode, pool_k=pool_k, adapt=adapt)
        return float(np.mean(np.abs(pred - target)))

    out = {}
    for name, p in named_parameters(model) + [("curve", curve)]:
        num = np.empty_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = (grads[name], num)
    return out
