"""Segmentation training losses: BCE, Dice and a distance-weighted Hausdorff surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, clamp, log
from .autodiff.tensor import as_tensor

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1 / 3
    dice: float = 1 / 3
    hd: float = 1 / 3

    def __post_init__(self):
        vals = (self.bce, self.dice, self.hd)
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {sum(vals)!r}")


def _check(pred: Tensor, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")


def bce_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    y = np.asarray(target, dtype=pred.dtype)
    _check(pred, y)
    p = clamp(pred, EPS, 1 - EPS)
    return -(log(p) * y + log(1 - p) * (1 - y)).mean()


def dice_loss(pred, target, smooth: float = 1.0) -> Tensor:
    """Soft Dice per image (last two axes), averaged over any leading axes."""
    pred = as_tensor(pred)
    y = np.asarray(target, dtype=pred.dtype)
    _check(pred, y)
    inter = (pred * y).sum(axis=(-2, -1))
    denom = pred.sum(axis=(-2, -1)) + y.sum(axis=(-2, -1)) + smooth
    return (1 - (inter * 2 + smooth) / denom).mean()


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Distance of every pixel to the nearest pixel of the opposite class.

    Masks without both classes have no boundary and map to zeros.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any() or m.all():
        return np.zeros(m.shape)
    return ndimage.distance_transform_edt(m) + ndimage.distance_transform_edt(~m)


def _distance_weights(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    flat_p = (pred > 0.5).reshape((-1,) + pred.shape[-2:])
    flat_t = np.asarray(target).reshape((-1,) + target.shape[-2:])
    out = np.empty(flat_t.shape)
    for k in range(flat_t.shape[0]):
        out[k] = boundary_distance(flat_t[k]) ** 2 + boundary_distance(flat_p[k]) ** 2
    return out.reshape(target.shape)


def hausdorff_dt_loss(pred, target) -> Tensor:
    """Mean of ``(p - y)^2 * (dt_target^2 + dt_pred^2)``; distance maps are constants."""
    pred = as_tensor(pred)
    y = np.asarray(target, dtype=pred.dtype)
    _check(pred, y)
    weights = _distance_weights(pred.data, y).astype(pred.dtype)
    diff = pred - y
    return (diff * diff * weights).mean()


def head_loss(pred, target, weights: LossWeights = LossWeights()) -> Tensor:
    total = None
    for w, fn in ((weights.bce, bce_loss), (weights.dice, dice_loss), (weights.hd, hausdorff_dt_loss)):
        if w == 0:
            continue
        term = fn(pred, target) * w
        total = term if total is None else total + term
    return total


def mixture_loss(preds, targets, weights: LossWeights = LossWeights()) -> Tensor:
    """Mean over the bolus and pharynx heads of the weighted per-head mixture.

    ``targets`` is a MaskPair or an array with the two heads on axis -3.
    """
    if not hasattr(targets, "bolus"):
        arr = np.asarray(targets)
        targets = (np.take(arr, 0, axis=-3), np.take(arr, 1, axis=-3))
    b_target, p_target = targets
    b_pred, p_pred = preds
    return (head_loss(b_pred, b_target, weights) + head_loss(p_pred, p_target, weights)) * 0.5
