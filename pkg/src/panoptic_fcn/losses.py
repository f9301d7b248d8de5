"""Dice-based segmentation objective and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

DICE_EPS = 1e-4


def dice_loss(pred: Tensor, target: Tensor, ignore: Tensor | None = None,
              eps: float = DICE_EPS) -> tuple[Tensor, Tensor]:
    """Squared-denominator dice loss over the last two dims.

    ``1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)`` with ignored pixels
    removed from every sum. Returns ``(loss, valid)``: instances with no
    non-ignored pixel get loss 0 and ``valid = False``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    y = target.to(pred.dtype)
    if ignore is not None:
        keep = (~ignore.bool()).to(pred.dtype)
        if keep.shape != pred.shape:
            keep = keep.expand_as(pred)
    else:
        keep = torch.ones_like(pred)
    p = pred * keep
    y = y * keep
    inter = (p * y).sum(dim=(-2, -1))
    denom = (p * p).sum(dim=(-2, -1)) + (y * y).sum(dim=(-2, -1))
    loss = 1 - (2 * inter + eps) / (denom + eps)
    valid = keep.sum(dim=(-2, -1)) > 0
    return torch.where(valid, loss, torch.zeros_like(loss)), valid


def score_weights(scores: Tensor) -> Tensor:
    """``w_k = s_k / sum_i s_i`` (uniform when every score is zero); scores are detached."""
    s = scores.detach().to(torch.float64 if scores.dtype == torch.float64 else torch.float32)
    total = s.sum()
    if total <= 0:
        return torch.full_like(s, 1.0 / len(s))
    return s / total


def weighted_dice(preds: Tensor, scores: Tensor, target: Tensor, ignore: Tensor | None = None) -> Tensor:
    """Score-weighted dice of ``k`` predictions ``(k, H, W)`` sharing one target."""
    k = preds.shape[0]
    tgt = target.unsqueeze(0).expand(k, -1, -1)
    ign = None if ignore is None else ignore.unsqueeze(0).expand(k, -1, -1)
    losses, _ = dice_loss(preds, tgt, ign)
    return (score_weights(scores).to(losses.dtype) * losses).sum()


@dataclass
class InstanceGroup:
    """``k`` soft masks of one instance, with their sampling scores and shared target."""

    preds: Tensor  # (k, H, W)
    scores: Tensor  # (k,)
    target: Tensor  # (H, W)
    ignore: Tensor | None = None


def weighted_dice_loss(groups: Sequence[InstanceGroup]) -> Tensor:
    """``L_seg = sum_j WDice_j / (M + N)``; zero when there are no instances."""
    if not groups:
        return torch.zeros(())
    total = sum(weighted_dice(g.preds, g.scores, g.target, g.ignore) for g in groups)
    return total / len(groups)


def total_objective(l_pos: Tensor | float, l_seg: Tensor | float,
                    lambda_pos: float = 1.0, lambda_seg: float = 3.0):
    if lambda_pos < 0 or lambda_seg < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_pos * l_pos + lambda_seg * l_seg
