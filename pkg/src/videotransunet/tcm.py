"""Temporal context module: attention-weighted blending of per-frame features.

Features are handled as ``(T, C, h, w)`` or batched ``(B, T, C, h, w)``.
Per slot ``t`` a learned channel vector ``w[t]`` scores every spatial
position; a softmax across slots gives the correlation maps, which are
rescaled by their own spatial mass and used to pool each frame into one
channel vector. The pooled vectors, broadcast back over space and added to
the frame features, are mixed with per-slot gains and added residually to
the centre frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax, stack
from .autodiff.tensor import as_tensor


@dataclass
class TcmOutput:
    blended: Tensor  # (C, h, w) or (B, C, h, w)
    attn: Tensor  # (T, h, w) or (B, T, h, w)


def init_tcm_params(slots: int, channels: int, rng: np.random.Generator) -> dict:
    return {
        "tcm.w": (rng.standard_normal((slots, channels)) / np.sqrt(channels)).astype(np.float32),
        "tcm.w_star": np.ones(slots, np.float32),
        "tcm.w_star2": np.zeros(slots, np.float32),
    }


def _as_features(features) -> Tensor:
    if isinstance(features, (list, tuple)):
        return stack([as_tensor(f) for f in features], axis=0)
    return as_tensor(features)


def _slot_axis(x: Tensor) -> int:
    if x.ndim not in (4, 5):
        raise ValueError(f"features must be (T, C, h, w) or (B, T, C, h, w), got {x.shape}")
    return x.ndim - 4


def temporal_correlation(features, params: dict) -> Tensor:
    """Softmax over slots of the per-position logits ``dot(w[t], x[t, :, i])``."""
    x = _as_features(features)
    ax = _slot_axis(x)
    w = as_tensor(params["tcm.w"])
    slots, channels = x.shape[ax], x.shape[ax + 1]
    if w.shape != (slots, channels):
        raise ValueError(f"{slots} feature slots of {channels} channels but tcm.w has shape {w.shape}")
    logits = (x * w.reshape((slots, channels, 1, 1))).sum(axis=ax + 1)
    return softmax(logits, axis=ax)


def normalize_correlation(corr) -> Tensor:
    """Scale each slot's map by its spatial sum over ``h*w``."""
    corr = as_tensor(corr)
    h, w = corr.shape[-2:]
    return corr * corr.sum(axis=(-2, -1), keepdims=True) * (1.0 / (h * w))


def blend(features, xhat, params: dict, center: int) -> TcmOutput:
    x = _as_features(features)
    xhat = as_tensor(xhat)
    ax = _slot_axis(x)
    slots = x.shape[ax]
    if not 0 <= center < slots:
        raise IndexError(f"centre slot {center} out of range for {slots} slots")
    w_star = as_tensor(params["tcm.w_star"]).reshape((slots, 1, 1, 1))
    w_star2 = as_tensor(params["tcm.w_star2"]).reshape((slots, 1, 1, 1))
    weights = xhat.reshape(xhat.shape[: ax + 1] + (1,) + xhat.shape[ax + 1 :])
    pooled = (x * weights).sum(axis=(-2, -1), keepdims=True)  # (.., T, C, 1, 1)
    mixed = (w_star2 * (x + w_star * pooled)).sum(axis=ax)
    center_feat = x[(slice(None),) * ax + (center,)]
    return TcmOutput(blended=center_feat + mixed, attn=xhat)


def tcm_forward(features, params: dict, center: int) -> TcmOutput:
    x = _as_features(features)
    corr = temporal_correlation(x, params)
    out = blend(x, normalize_correlation(corr), params, center)
    return TcmOutput(blended=out.blended, attn=corr)
