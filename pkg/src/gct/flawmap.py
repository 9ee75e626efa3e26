"""Ground truth for the flaw detector.

Converts the sparse per-pixel error ``|prediction - label|`` into a dense
flaw probability map by blurring, repeated dilate+blur and a final
normalization. Per-sample maps are ``(H, W)`` float64 arrays; predictions
and labels are channel-last ``(H, W, O)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class PipelineParams:
    mu: float
    nu: int = 1

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if int(self.nu) != self.nu or self.nu < 0:
            raise ConfigError(f"nu must be a non-negative integer, got {self.nu}")

    def kernel_shapes(self, height: int, width: int):
        """Return ``((kh1, kw1), (kh2, kw2))`` for the first and the repeated blur."""
        first = (odd_kernel(height / 8, height), odd_kernel(width / 8, width))
        repeated = (odd_kernel(height / 4, height), odd_kernel(width / 4, width))
        return first, repeated


def odd_kernel(size: float, limit: int | None = None) -> int:
    """Nearest odd integer to ``size`` (ties round up), at least 1 and at most ``limit``."""
    k = 2 * math.floor((size - 1) / 2 + 0.5) + 1
    k = max(k, 1)
    if limit is not None:
        largest = limit if limit % 2 == 1 else limit - 1
        k = min(k, max(largest, 1))
    return k


def _check_kernel(kernel_h, kernel_w, shape=None):
    for k in (kernel_h, kernel_w):
        if int(k) != k or k < 1 or k % 2 == 0:
            raise InvalidInputError(f"kernel dims must be odd and >= 1, got {(kernel_h, kernel_w)}")
    if shape is not None and (kernel_h > shape[0] or kernel_w > shape[1]):
        raise InvalidInputError(f"kernel {(kernel_h, kernel_w)} larger than map {tuple(shape)}")


def _as_map(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected an (H, W) map, got shape {arr.shape}")
    return arr


def channel_abs_diff(pred, label, mu: float) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape or pred.ndim != 3:
        raise InvalidInputError(f"pred/label must share an (H, W, O) shape, got {pred.shape} vs {label.shape}")
    if not mu > 0:
        raise InvalidInputError(f"mu must be > 0, got {mu}")
    return mu * np.abs(pred - label).sum(axis=-1)


def gaussian_kernel1d(size: int) -> np.ndarray:
    """Normalized Gaussian taps with sigma = (size - 1) / 6."""
    if size == 1:
        return np.ones(1)
    sigma = (size - 1) / 6.0
    x = np.arange(size) - (size - 1) / 2.0
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def _blur_axes(arr, kernel_h, kernel_w, axes):
    out = ndimage.correlate1d(arr, gaussian_kernel1d(kernel_h), axis=axes[0], mode="nearest")
    return ndimage.correlate1d(out, gaussian_kernel1d(kernel_w), axis=axes[1], mode="nearest")


def gaussian_blur(gray, kernel_h: int, kernel_w: int) -> np.ndarray:
    gray = _as_map(gray)
    _check_kernel(kernel_h, kernel_w, gray.shape)
    return _blur_axes(gray, kernel_h, kernel_w, (0, 1))


def dilate(gray, kernel_h: int, kernel_w: int) -> np.ndarray:
    """Square max filter with replicated borders."""
    gray = _as_map(gray)
    _check_kernel(kernel_h, kernel_w)
    return ndimage.maximum_filter(gray, size=(kernel_h, kernel_w), mode="nearest")


def normalize(gray) -> np.ndarray:
    """Min-max scale into [0, 1]; constant maps become all zeros."""
    gray = _as_map(gray)
    if not np.all(np.isfinite(gray)):
        raise InvalidInputError("cannot normalize a map with non-finite values")
    lo, hi = gray.min(), gray.max()
    if hi - lo <= 0:
        return np.zeros_like(gray)
    return (gray - lo) / (hi - lo)


def pipeline_c(pred, label, params: PipelineParams) -> np.ndarray:
    """Dense flaw ground truth of shape ``(H, W, 1)`` for one sample."""
    gray = channel_abs_diff(pred, label, params.mu)
    (bh, bw), (rh, rw) = params.kernel_shapes(*gray.shape)
    gray = gaussian_blur(gray, bh, bw)
    for _ in range(params.nu):
        gray = dilate(gray, 3, 3)
        gray = gaussian_blur(gray, rh, rw)
    return normalize(gray)[..., None]


def pipeline_c_batch(pred, label, params: PipelineParams) -> np.ndarray:
    """Vectorized :func:`pipeline_c` over channel-first batches.

    ``pred`` and ``label`` are ``(B, O, H, W)``; returns ``(B, 1, H, W)``.
    Every stage acts on the spatial axes only, so this equals looping
    :func:`pipeline_c` over samples.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape or pred.ndim != 4:
        raise InvalidInputError(f"pred/label must share a (B, O, H, W) shape, got {pred.shape} vs {label.shape}")
    gray = params.mu * np.abs(pred - label).sum(axis=1)
    (bh, bw), (rh, rw) = params.kernel_shapes(*gray.shape[1:])
    gray = _blur_axes(gray, bh, bw, (1, 2))
    for _ in range(params.nu):
        gray = ndimage.maximum_filter(gray, size=(1, 3, 3), mode="nearest")
        gray = _blur_axes(gray, rh, rw, (1, 2))
    lo = gray.min(axis=(1, 2), keepdims=True)
    span = gray.max(axis=(1, 2), keepdims=True) - lo
    out = np.divide(gray - lo, span, out=np.zeros_like(gray), where=span > 0)
    return out[:, None]
