"""Dice-based segmentation losses and their composite.

The total objective is the Dice loss on the final mask plus a weighted
auxiliary Dice loss on the binary foreground predicted from the mixed mask
feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import MaskBundle
from .tensor import ContractError, Tensor

DICE_EPS = 1.0  # smoothing; makes empty-vs-empty score a zero loss


@dataclass
class LossReport:
    """Scalar loss tensors for one step; total == l_iou + lam * l_mix."""

    l_iou: Tensor
    l_mix: Tensor
    total: Tensor
    lam: float

    def values(self) -> tuple[float, float, float]:
        return self.l_iou.item(), self.l_mix.item(), self.total.item()


def dice_loss(pred_prob: Tensor, gt) -> Tensor:
    """1 - Dice overlap, summed over space, averaged over leading axes.

    ``pred_prob`` must already be probabilities in [0, 1]; ``gt`` is a
    binary array of the same shape.
    """
    pred_prob = T.as_tensor(pred_prob)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if gt.shape != pred_prob.shape:
        raise T.ShapeError(f"dice_loss: pred {pred_prob.shape} vs gt {gt.shape}")
    if pred_prob.ndim < 2:
        raise T.ShapeError(f"dice_loss: need spatial axes, got {pred_prob.shape}")
    pd = pred_prob.data
    if pd.min() < 0.0 or pd.max() > 1.0:
        raise ContractError(
            f"dice_loss: probabilities outside [0, 1] (min {pd.min()}, max {pd.max()})"
        )
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise ContractError("dice_loss: ground truth must be binary")
    axes = (-2, -1)
    inter = T.sum_over(T.mul(pred_prob, gt), axis=axes)
    totals = T.add(T.sum_over(pred_prob, axis=axes), gt.sum(axis=axes))
    dice = T.div(T.add(T.scale(inter, 2.0), DICE_EPS), T.add(totals, DICE_EPS))
    return T.mean_over(T.sub(1.0, dice))


def mixing_loss(aux_logits: Tensor, gt) -> Tensor:
    """Dice loss of the auxiliary foreground head against collapsed labels.

    ``gt`` is class-indexed (T, h, w); any nonzero class counts as
    foreground.
    """
    aux_logits = T.as_tensor(aux_logits)
    gt = np.asarray(gt)
    t, _, h, w = aux_logits.shape
    if gt.shape != (t, h, w):
        raise T.ShapeError(f"mixing_loss: aux {aux_logits.shape} vs gt {gt.shape}")
    fg = (gt != 0).astype(np.float64)[:, None]
    return dice_loss(T.sigmoid(aux_logits), fg)


def _one_hot(gt: np.ndarray, n_class: int) -> np.ndarray:
    t, h, w = gt.shape
    out = np.zeros((t, n_class, h, w))
    for c in range(n_class):
        out[:, c] = gt == c
    return out


def total_loss(bundle: MaskBundle, gt, lam: float) -> LossReport:
    """Composite objective: Dice IoU loss plus lam times the mixing loss.

    Binary heads (n_class == 1) are scored with sigmoid probabilities;
    semantic heads use softmax over the class axis with one-vs-all Dice
    averaged over classes.
    """
    if lam < 0:
        raise ContractError(f"total_loss: lambda must be >= 0, got {lam}")
    gt = np.asarray(gt)
    n_class = bundle.logits.shape[1]
    if n_class == 1:
        probs = T.sigmoid(bundle.logits)
        target = (gt != 0).astype(np.float64)[:, None]
    else:
        probs = T.softmax(bundle.logits, axis=1)
        target = _one_hot(gt, n_class)
    l_iou = dice_loss(probs, target)
    l_mix = mixing_loss(bundle.aux_logits, gt)
    total = T.add(l_iou, T.scale(l_mix, lam))
    return LossReport(l_iou=l_iou, l_mix=l_mix, total=total, lam=lam)
