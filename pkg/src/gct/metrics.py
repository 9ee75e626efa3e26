"""Validation metrics: confusion-matrix mIoU and PSNR."""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidInputError


def confusion_matrix(pred, label, classes: int) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted classes."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    label = np.asarray(label).ravel().astype(np.int64)
    if pred.shape != label.shape:
        raise InvalidInputError("prediction and label must have the same number of pixels")
    return np.bincount(label * classes + pred, minlength=classes * classes).reshape(classes, classes)


def miou(cm) -> float:
    """Mean of TP / (TP + FP + FN) over classes present in prediction or truth."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise InvalidInputError(f"expected a KxK confusion matrix with K >= 2, got shape {cm.shape}")
    if cm.sum() == 0:
        raise InvalidInputError("confusion matrix is empty")
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    return float(np.mean(tp[present] / union[present]))


def psnr(pred, label, max_value: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {label.shape}")
    if not max_value > 0:
        raise InvalidInputError("max_value must be > 0")
    mse = float(np.mean((pred - label) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)
