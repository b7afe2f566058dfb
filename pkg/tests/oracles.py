"""Brute-force reference implementations, deliberately written as plain loops."""

import math

import numpy as np


def conv2d_loops(x, weight, bias, stride=1, padding=(0, 0)):
    ph, pw = padding
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    acc = float(bias[o])
                    for i in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                yy = r * stride + u - ph
                                xx = s * stride + v - pw
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += float(weight[o, i, u, v]) * float(x[b, i, yy, xx])
                    out[b, o, r, s] = acc
    return out


def avg_pool_loops(x, k, stride=1, padding=0):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            yy, xx = r * stride + u - padding, s * stride + v - padding
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += x[b, ch, yy, xx]
                    out[b, ch, r, s] = acc / (k * k)
    return out


def max_pool_same_loops(x, k):
    n, c, h, w = x.shape
    r = k // 2
    out = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    best = -math.inf
                    for u in range(-r, r + 1):
                        for v in range(-r, r + 1):
                            yy = min(max(i + u, 0), h - 1)
                            xx = min(max(j + v, 0), w - 1)
                            best = max(best, x[b, ch, yy, xx])
                    out[b, ch, i, j] = best
    return out


def bn_scalar(v, mu, sigma, gamma, beta):
    return (v - mu) * (gamma / sigma) + beta
