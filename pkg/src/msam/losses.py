"""Dice + cross-entropy objective and overlap metrics.

Losses take ``(N, M)`` probability and one-hot arrays (voxels by classes).
Squared Dice with smoothing::

    L_dice = 1 - (1/M) * sum_j (2 * sum_i p_ij g_ij + eps) / (sum_i p_ij² + sum_i g_ij² + eps)

A class absent from both ``p`` and ``g`` scores 1, so a perfect prediction
has loss exactly 0.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from msam.errors import InvalidProbability, ShapeMismatch

DICE_EPS = 1e-6
CE_EPS = 1e-12
ROW_SUM_TOL = 1e-5


def _as_tensor(x) -> tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x), dtype=torch.float64), False


def _prepare(p, g, validate: bool) -> tuple[Tensor, Tensor, bool]:
    p, is_t = _as_tensor(p)
    g, _ = _as_tensor(g)
    if p.ndim != 2 or p.shape != g.shape or p.shape[0] < 1 or p.shape[1] < 1:
        raise ShapeMismatch(f"probabilities {tuple(p.shape)} vs one-hot {tuple(g.shape)}")
    g = g.to(p.dtype)
    if validate:
        with torch.no_grad():
            if (p < 0).any() or (p > 1).any():
                raise InvalidProbability("probabilities must lie in [0, 1]")
            if ((p.sum(dim=1) - 1).abs() > ROW_SUM_TOL).any():
                raise InvalidProbability(f"probability rows must sum to 1 within {ROW_SUM_TOL}")
    return p, g, is_t


def _out(value: Tensor, is_tensor: bool):
    return value if is_tensor else float(value)


def dice_loss(p, g, eps: float = DICE_EPS, validate: bool = True):
    p, g, is_t = _prepare(p, g, validate)
    overlap = (p * g).sum(dim=0)
    denom = (p * p).sum(dim=0) + (g * g).sum(dim=0)
    per_class = (2.0 * overlap + eps) / (denom + eps)
    return _out(1.0 - per_class.mean(), is_t)


def ce_loss(p, g, eps: float = CE_EPS, validate: bool = True):
    p, g, is_t = _prepare(p, g, validate)
    nll = -(g * torch.log(p.clamp_min(eps))).sum(dim=1)
    return _out(nll.mean(), is_t)


def dice_ce_loss(p, g, w0: float = 0.5, w1: float = 0.5, validate: bool = True):
    """``w0 * CE + w1 * Dice``; both weights default to 0.5."""
    if w0 < 0 or w1 < 0:
        raise ValueError("loss weights must be non-negative")
    return w0 * ce_loss(p, g, validate=validate) + w1 * dice_loss(p, g, validate=validate)


def binary_probabilities(logits: Tensor) -> Tensor:
    """Foreground logits of any shape -> ``(N, 2)`` [background, foreground] probabilities."""
    fg = torch.sigmoid(logits.reshape(-1))
    return torch.stack([1.0 - fg, fg], dim=1)


def binary_one_hot(target: Tensor) -> Tensor:
    t = target.reshape(-1).long()
    return torch.nn.functional.one_hot(t, 2)


def dice_ce_from_logits(logits: Tensor, target: Tensor, w0: float = 0.5, w1: float = 0.5) -> Tensor:
    """Mean over the batch of the per-sample two-class DiceCE loss.

    ``logits`` and ``target`` are ``(B, ...)`` with matching shapes.
    """
    losses = []
    for lg, tg in zip(logits, target):
        p = binary_probabilities(lg)
        g = binary_one_hot(tg).to(p.dtype)
        losses.append(dice_ce_loss(p, g, w0, w1, validate=False))
    return torch.stack(losses).mean()


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(pred, "labels", pred))
    b = np.asarray(getattr(gt, "labels", gt))
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {a.shape} vs ground truth {b.shape}")
    return a.astype(bool), b.astype(bool)


def dsc(pred, gt) -> float:
    """Dice similarity coefficient; two empty masks score 1.0."""
    a, b = _binary_pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(pred, gt) -> float:
    a, b = _binary_pair(pred, gt)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union
