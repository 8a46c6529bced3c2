"""STAPLE label fusion: EM estimate of a hidden binary truth and per-rater
sensitivity/specificity from several binary annotations."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import fileio
from .autodiff import serialize
from .decoder import HEADS

CLAMP = 1e-5


@dataclass
class StapleResult:
    W: np.ndarray  # posterior foreground probability per pixel
    p: np.ndarray  # per-rater sensitivity
    q: np.ndarray  # per-rater specificity
    iterations: int
    converged: bool
    log_likelihood: list  # data log-likelihood after each EM iteration


def _likelihood_terms(D, p, q, prior):
    # a: P(decisions | truth=1), b: P(decisions | truth=0), per pixel
    a = np.prod(np.where(D, p[:, None], 1 - p[:, None]), axis=0)
    b = np.prod(np.where(D, 1 - q[:, None], q[:, None]), axis=0)
    return prior * a, (1 - prior) * b


def data_log_likelihood(D, p, q, prior) -> float:
    fa, fb = _likelihood_terms(np.asarray(D, bool).reshape(len(D), -1), np.asarray(p), np.asarray(q), prior)
    return float(np.log(fa + fb).sum())


def staple(stack, prior=None, tol: float = 1e-6, max_iter: int = 100, init: float = 0.9999) -> StapleResult:
    """Fuse ``stack`` of shape ``(R, ...)`` binary decisions.

    ``prior`` defaults to the mean foreground fraction over all raters and
    is clamped away from 0 and 1. Iterates until the largest change in any
    ``p_j`` or ``q_j`` falls below ``tol``.
    """
    D = np.asarray(stack) > 0
    if D.ndim < 2 or D.shape[0] < 2:
        raise ValueError(f"need at least two raters stacked on axis 0, got shape {D.shape}")
    shape = D.shape[1:]
    D = D.reshape(D.shape[0], -1)
    r = D.shape[0]
    if prior is None:
        prior = D.mean()
    prior = np.clip(np.asarray(prior, dtype=np.float64), CLAMP, 1 - CLAMP)
    if prior.ndim:
        if prior.size != D.shape[1]:
            raise ValueError("prior map does not match mask shape")
        prior = prior.reshape(-1)
    Df = D.astype(np.float64)
    p = np.full(r, init)
    q = np.full(r, init)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        fa, fb = _likelihood_terms(D, p, q, prior)
        W = fa / (fa + fb)
        sw, sv = W.sum(), (1 - W).sum()
        p_new = (Df @ W) / sw if sw > 0 else p.copy()
        q_new = ((1 - Df) @ (1 - W)) / sv if sv > 0 else q.copy()
        p_new = np.clip(p_new, CLAMP, 1 - CLAMP)
        q_new = np.clip(q_new, CLAMP, 1 - CLAMP)
        delta = max(np.abs(p_new - p).max(), np.abs(q_new - q).max())
        p, q = p_new, q_new
        history.append(data_log_likelihood(D, p, q, prior))
        if delta < tol:
            converged = True
            break
    fa, fb = _likelihood_terms(D, p, q, prior)
    W = fa / (fa + fb)
    return StapleResult(W.reshape(shape), p, q, it, converged, history)


def simulate_raters(truth, rates, rng) -> np.ndarray:
    """Corrupt ``truth`` independently per rater with ``(sensitivity, specificity)`` pairs."""
    t = np.asarray(truth) > 0
    out = []
    for p, q in rates:
        u = rng.random(t.shape)
        out.append(np.where(t, u < p, u >= q))
    return np.stack(out).astype(np.uint8)


def fuse_dataset(annotation_dirs, out_dir, tol: float = 1e-6, max_iter: int = 100) -> list:
    """Run STAPLE per frame and instance over ``<rater>/<frame_id>_<instance>.pgm`` files.

    Writes ``<frame_id>_<instance>.pgm`` (posterior >= 0.5) and the matching
    ``.vtt1`` posterior map to ``out_dir``; returns the written mask paths.
    """
    if len(annotation_dirs) < 2:
        raise ValueError("need at least two rater directories")
    names = None
    for d in annotation_dirs:
        if not os.path.isdir(d):
            raise FileNotFoundError(f"rater directory {d} does not exist")
        found = sorted(f for f in os.listdir(d) if f.endswith(".pgm"))
        if names is None:
            names = found
        elif found != names:
            raise ValueError(f"rater directory {d} holds a different set of masks")
    for name in names:
        instance = name[:-4].rsplit("_", 1)[-1]
        if instance not in HEADS:
            raise ValueError(f"{name}: instance must be one of {HEADS}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in names:
        masks = np.stack([fileio.read_mask_pgm(os.path.join(d, name)) for d in annotation_dirs])
        result = staple(masks, tol=tol, max_iter=max_iter)
        stem = os.path.join(out_dir, name[:-4])
        fileio.write_mask_pgm(stem + ".pgm", result.W >= 0.5)
        serialize.save(stem + ".vtt1", result.W.astype(np.float32))
        written.append(stem + ".pgm")
    return written
