"""Losses and gating masks used to train the task models and the flaw detector.

All tensors are channel-first batches: predictions ``(B, O, H, W)``, flaw
maps and masks ``(B, 1, H, W)``. Every loss is a plain sum over pixels
(with the 1/2 factors written into the objectives) averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class SslWeights:
    lambda_dc: float
    lambda_fc: float
    xi: float
    eta: int

    def __post_init__(self):
        if self.lambda_dc < 0:
            raise ConfigError(f"lambda_dc must be >= 0, got {self.lambda_dc}")
        if self.lambda_fc < 0:
            raise ConfigError(f"lambda_fc must be >= 0, got {self.lambda_fc}")
        check_xi(self.xi)
        if int(self.eta) != self.eta or self.eta < 0:
            raise ConfigError(f"eta must be a non-negative integer, got {self.eta}")


def check_xi(xi: float):
    if not 0.0 <= xi <= 1.0:
        raise ConfigError(f"xi must lie in [0, 1], got {xi}")


def _same_shape(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise InvalidInputError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _batch_sum(per_pixel: torch.Tensor) -> torch.Tensor:
    return per_pixel.reshape(per_pixel.shape[0], -1).sum(dim=1).mean()


def normalize_flaw(flaw: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max scaling into [0, 1]; constant maps become zeros."""
    flat = flaw.reshape(flaw.shape[0], -1)
    lo = flat.min(dim=1).values.view(-1, *([1] * (flaw.dim() - 1)))
    hi = flat.max(dim=1).values.view(-1, *([1] * (flaw.dim() - 1)))
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (flaw - lo) / safe, torch.zeros_like(flaw))


def clamp_flaw(flaw: torch.Tensor, xi: float) -> torch.Tensor:
    """Pixels whose flaw probability exceeds ``xi`` are set to 1."""
    check_xi(xi)
    return torch.where(flaw > xi, torch.ones_like(flaw), flaw)


def dc_masks(f1: torch.Tensor, f2: torch.Tensor):
    """Masks selecting where each model learns from the other.

    ``m1`` is 1 where model 1's (clamped) flaw exceeds model 2's, i.e. model 1
    takes model 2's prediction as its pseudo label there. Ties disable both.
    """
    _same_shape(f1, f2)
    return (f1 > f2).to(f1.dtype), (f2 > f1).to(f1.dtype)


def fc_mask(f1: torch.Tensor, f2: torch.Tensor, xi: float) -> torch.Tensor:
    """1 where both models are unreliable (flaw above ``xi``)."""
    _same_shape(f1, f2)
    check_xi(xi)
    return ((f1 > xi) & (f2 > xi)).to(f1.dtype)


@torch.no_grad()
def gct_masks(flaw1: torch.Tensor, flaw2: torch.Tensor, xi: float, normalize: bool = True):
    """Clamp both flaw maps and derive ``(m_dc1, m_dc2, m_fc)``.

    With ``normalize=True`` each map is first min-max scaled per sample.
    """
    if normalize:
        flaw1, flaw2 = normalize_flaw(flaw1), normalize_flaw(flaw2)
    c1, c2 = clamp_flaw(flaw1, xi), clamp_flaw(flaw2, xi)
    m1, m2 = dc_masks(c1, c2)
    return m1, m2, fc_mask(c1, c2, xi)


def loss_sup(pred: torch.Tensor, label: torch.Tensor, criterion: str = "mse") -> torch.Tensor:
    """Supervised term.

    ``"mse"``: 1/2 squared error summed over (h, w, o). ``"ce"``: ``pred`` holds
    logits ``(B, K, H, W)`` and ``label`` integer classes ``(B, H, W)``; the
    per-pixel cross-entropy is summed over (h, w).
    """
    if criterion == "mse":
        _same_shape(pred, label)
        return _batch_sum(0.5 * (pred - label) ** 2)
    if criterion == "ce":
        if label.shape != (pred.shape[0],) + tuple(pred.shape[2:]):
            raise InvalidInputError(f"label shape {tuple(label.shape)} does not match logits {tuple(pred.shape)}")
        if label.numel() and (label.min() < 0 or label.max() >= pred.shape[1]):
            raise InvalidInputError(f"class labels must lie in [0, {pred.shape[1]})")
        return _batch_sum(F.cross_entropy(pred, label.long(), reduction="none"))
    raise ConfigError(f"unknown criterion {criterion!r}")


def loss_dc(pred_k: torch.Tensor, pred_other: torch.Tensor, mask_k: torch.Tensor) -> torch.Tensor:
    """Dynamic consistency: pull ``pred_k`` toward the detached ``pred_other`` on ``mask_k``."""
    _same_shape(pred_k, pred_other)
    if mask_k.shape != (pred_k.shape[0], 1) + tuple(pred_k.shape[2:]):
        raise InvalidInputError(f"mask shape {tuple(mask_k.shape)} does not match {tuple(pred_k.shape)}")
    sq = ((pred_k - pred_other.detach()) ** 2).sum(dim=1, keepdim=True)
    return _batch_sum(0.5 * mask_k.detach() * sq)


def loss_fc(flaw: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Flaw correction: push the masked flaw probabilities toward zero."""
    _same_shape(flaw, mask)
    return _batch_sum(0.5 * mask.detach() * flaw ** 2)


def loss_flaw_detector(flaw_pred: torch.Tensor, flaw_gt: torch.Tensor) -> torch.Tensor:
    _same_shape(flaw_pred, flaw_gt)
    return _batch_sum(0.5 * (flaw_pred - flaw_gt.detach()) ** 2)


def total_task_loss(sup, dc, fc, weights: SslWeights, rampup: float):
    return sup + rampup * weights.lambda_dc * dc + weights.lambda_fc * fc


def cosine_rampup(epoch: float, eta: int) -> float:
    """0.5 * (1 - cos(pi * min(epoch, eta) / eta)); identically 1 when ``eta == 0``."""
    if epoch < 0:
        raise InvalidInputError(f"epoch must be >= 0, got {epoch}")
    if eta == 0:
        return 1.0
    t = min(epoch, eta) / eta
    return 0.5 * (1.0 - math.cos(math.pi * t))
