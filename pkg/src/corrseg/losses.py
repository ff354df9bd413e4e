"""Training objective: soft Dice loss plus weighted correlation loss."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError

DICE_EPS = 1e-5


def one_hot(classes: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(B, D, H, W) integer classes -> (B, C, D, H, W) float one-hot."""
    oh = F.one_hot(classes.long(), n_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS,
              include_background: bool = True) -> torch.Tensor:
    """1 - (2 * sum(p * g) + eps) / (sum(p + g) + eps), one global ratio over
    every class and voxel of the batch.

    ``include_background=False`` drops channel 0 from both sums.
    """
    if probs.shape != target.shape:
        raise ShapeMismatchError(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    target = target.to(probs.dtype)
    if not include_background:
        probs, target = probs[:, 1:], target[:, 1:]
    inter = (probs * target).sum()
    total = probs.sum() + target.sum()
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def total_loss(dice, corr, lam: float = 0.1):
    return dice + lam * corr
