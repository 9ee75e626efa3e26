"""Brute-force reference implementations used by the tests.

Deliberately loop-based and independent of scipy/torch so they can check the
vectorized code paths.
"""
import math

import numpy as np


def abs_diff_loop(pred, label, mu):
    h, w, o = pred.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for c in range(o):
                s += abs(pred[i, j, c] - label[i, j, c])
            out[i, j] = mu * s
    return out


def gauss_taps(k):
    if k == 1:
        return [1.0]
    sigma = (k - 1) / 6.0
    taps = [math.exp(-0.5 * ((t - (k - 1) / 2) / sigma) ** 2) for t in range(k)]
    total = sum(taps)
    return [t / total for t in taps]


def blur_loop(gray, kh, kw):
    """Direct 2-D correlation with the outer-product kernel and replicated borders."""
    h, w = gray.shape
    ty, tx = gauss_taps(kh), gauss_taps(kw)
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for a in range(kh):
                for b in range(kw):
                    y = min(max(i + a - kh // 2, 0), h - 1)
                    x = min(max(j + b - kw // 2, 0), w - 1)
                    s += ty[a] * tx[b] * gray[y, x]
            out[i, j] = s
    return out


def dilate_loop(gray, kh, kw):
    h, w = gray.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            m = -math.inf
            for a in range(-(kh // 2), kh // 2 + 1):
                for b in range(-(kw // 2), kw // 2 + 1):
                    y = min(max(i + a, 0), h - 1)
                    x = min(max(j + b, 0), w - 1)
                    m = max(m, gray[y, x])
            out[i, j] = m
    return out


def normalize_loop(gray):
    lo, hi = min(gray.ravel()), max(gray.ravel())
    if hi == lo:
        return np.zeros_like(gray)
    return np.array([[(v - lo) / (hi - lo) for v in row] for row in gray])


def pipeline_loop(pred, label, mu, nu, k1, k2):
    g = abs_diff_loop(pred, label, mu)
    g = blur_loop(g, *k1)
    for _ in range(nu):
        g = dilate_loop(g, 3, 3)
        g = blur_loop(g, *k2)
    return normalize_loop(g)


# -- losses on (O, H, W) arrays of one sample


def mse_sup_loop(pred, label):
    o, h, w = pred.shape
    s = 0.0
    for c in range(o):
        for i in range(h):
            for j in range(w):
                s += 0.5 * (pred[c, i, j] - label[c, i, j]) ** 2
    return s


def dc_loop(pred_k, pred_other, mask):
    o, h, w = pred_k.shape
    s = 0.0
    for i in range(h):
        for j in range(w):
            inner = 0.0
            for c in range(o):
                inner += (pred_k[c, i, j] - pred_other[c, i, j]) ** 2
            s += mask[0, i, j] * inner
    return 0.5 * s


def fc_loop(flaw, mask):
    _, h, w = flaw.shape
    s = 0.0
    for i in range(h):
        for j in range(w):
            s += mask[0, i, j] * flaw[0, i, j] ** 2
    return 0.5 * s


def fd_loop(pred, gt):
    _, h, w = pred.shape
    s = 0.0
    for i in range(h):
        for j in range(w):
            s += (pred[0, i, j] - gt[0, i, j]) ** 2
    return 0.5 * s


def batch_mean(fn, *arrays):
    return sum(fn(*(a[n] for a in arrays)) for n in range(arrays[0].shape[0])) / arrays[0].shape[0]


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad
