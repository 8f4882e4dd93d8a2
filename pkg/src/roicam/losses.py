"""Classification and segmentation losses for mixed-annotation batches.

All functions take probabilities (post-sigmoid), accept array-likes and keep
the input dtype, so gradient checks can run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

BCE_EPS = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weight of the dice term and the smoothing constant used inside it."""

    lambda_dice: float = 1.0
    dice_epsilon: float = DICE_EPS

    def __post_init__(self):
        if not (math.isfinite(self.lambda_dice) and self.lambda_dice >= 0):
            raise ValueError(f"lambda_dice must be finite and >= 0, got {self.lambda_dice}")
        if not (math.isfinite(self.dice_epsilon) and self.dice_epsilon > 0):
            raise ValueError(f"dice_epsilon must be finite and > 0, got {self.dice_epsilon}")


def _pair(pred, target) -> tuple[torch.Tensor, torch.Tensor]:
    if not torch.is_tensor(pred):
        pred = torch.from_numpy(np.asarray(pred))
    if not pred.is_floating_point():
        pred = pred.double()
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return pred, target


def bce_loss(pred, target, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross entropy with predictions clamped to [eps, 1-eps]."""
    pred, target = _pair(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def bce_from_logits(logits, target) -> torch.Tensor:
    """``bce_loss(sigmoid(logits), target)`` without the clamp.

    Used for training: clamped probabilities have zero gradient, so a
    saturated wrong prediction could never recover.
    """
    logits, target = _pair(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target)


def per_sample_dice_loss(pred, target, epsilon: float = DICE_EPS) -> torch.Tensor:
    """Soft dice loss of each map in a ``[N, ...]`` batch, shape ``[N]``."""
    pred, target = _pair(pred, target)
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    dice = (2.0 * (p * t).sum(1) + epsilon) / (p.sum(1) + t.sum(1) + epsilon)
    return 1.0 - dice


def dice_loss(pred, target, epsilon: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`` over the whole map."""
    pred, target = _pair(pred, target)
    return per_sample_dice_loss(pred.reshape(1, -1), target.reshape(1, -1), epsilon)[0]


def loss_terms(class_pred, class_target, seg_pred=None, seg_target=None, annotated=None, epsilon=DICE_EPS):
    """``(bce, mean dice over annotated samples)``; the dice term is 0 when none are annotated.

    ``seg_pred``/``seg_target`` are ``[N, H, W]``. ``annotated`` is a boolean
    ``[N]`` selecting the rows that carry a mask; when omitted every row given
    counts as annotated.
    """
    bce = bce_loss(class_pred, class_target)
    if seg_pred is None or seg_target is None:
        return bce, bce.new_zeros(())
    seg_pred, seg_target = _pair(seg_pred, seg_target)
    if annotated is not None:
        annotated = torch.as_tensor(annotated, dtype=torch.bool)
        seg_pred, seg_target = seg_pred[annotated], seg_target[annotated]
    if seg_pred.shape[0] == 0:
        return bce, bce.new_zeros(())
    return bce, per_sample_dice_loss(seg_pred, seg_target, epsilon).mean()


def combined_loss(
    class_pred,
    class_target,
    seg_pred=None,
    seg_target=None,
    weights: LossWeights = LossWeights(),
    annotated=None,
) -> torch.Tensor:
    """BCE on the class output plus ``lambda_dice`` times the mean dice loss of annotated samples."""
    bce, dice = loss_terms(class_pred, class_target, seg_pred, seg_target, annotated, weights.dice_epsilon)
    if weights.lambda_dice == 0:
        return bce
    return bce + weights.lambda_dice * dice
