"""Binary-mask evaluation: DSC, HD95, ASD, sensitivity and specificity.

Conventions for empty masks: both empty gives DSC 1 and zero distances;
exactly one empty gives DSC 0 and the frame is left out of the HD95/ASD
means (it is counted in ``excluded``). Sensitivity (specificity) is 1 when
the target has no foreground (background) pixels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .decoder import HEADS

THRESHOLD = 0.5
COLUMNS = ("seq_id", "frame", "head", "dsc", "hd95", "asd", "sensitivity", "specificity")
METRICS = ("dsc", "hd95", "asd", "sensitivity", "specificity")


class EmptyMaskError(ValueError):
    pass


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(getattr(prob, "data", prob)) > threshold


def confusion(pred_bin, target_bin) -> tuple:
    p = np.asarray(pred_bin, dtype=bool)
    t = np.asarray(target_bin, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, tn, fn


def dsc(pred_bin, target_bin) -> float:
    tp, fp, _, fn = confusion(pred_bin, target_bin)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def sensitivity(pred_bin, target_bin) -> float:
    tp, _, _, fn = confusion(pred_bin, target_bin)
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def specificity(pred_bin, target_bin) -> float:
    _, fp, tn, _ = confusion(pred_bin, target_bin)
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image counts as background."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def surface_distances(pred_bin, target_bin) -> np.ndarray:
    """Sorted symmetric nearest-boundary distances between two nonempty masks."""
    bp, bt = boundary(pred_bin), boundary(target_bin)
    if not bp.any() or not bt.any():
        raise EmptyMaskError("surface distances need two nonempty masks")
    to_t = ndimage.distance_transform_edt(~bt)[bp]
    to_p = ndimage.distance_transform_edt(~bp)[bt]
    return np.sort(np.concatenate([to_t, to_p]))


def _distance_pair(pred_bin, target_bin):
    p = np.asarray(pred_bin, dtype=bool)
    t = np.asarray(target_bin, dtype=bool)
    if not p.any() and not t.any():
        return 0.0, 0.0
    if not p.any() or not t.any():
        return None
    d = surface_distances(p, t)
    return float(np.percentile(d, 95, method="linear")), float(d.mean())


def hd95(pred_bin, target_bin) -> float:
    pair = _distance_pair(pred_bin, target_bin)
    if pair is None:
        raise EmptyMaskError("HD95 undefined when exactly one mask is empty")
    return pair[0]


def asd(pred_bin, target_bin) -> float:
    pair = _distance_pair(pred_bin, target_bin)
    if pair is None:
        raise EmptyMaskError("ASD undefined when exactly one mask is empty")
    return pair[1]


def frame_metrics(pred_bin, target_bin) -> dict:
    """All five metrics; distances are NaN when exactly one mask is empty."""
    pair = _distance_pair(pred_bin, target_bin)
    hd, avg = (np.nan, np.nan) if pair is None else pair
    return {
        "dsc": dsc(pred_bin, target_bin),
        "hd95": hd,
        "asd": avg,
        "sensitivity": sensitivity(pred_bin, target_bin),
        "specificity": specificity(pred_bin, target_bin),
    }


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # dicts keyed by COLUMNS

    def add(self, seq_id: str, frame: int, head: str, values: dict):
        self.rows.append({"seq_id": seq_id, "frame": frame, "head": head, **values})

    def per_head(self, head: str) -> list:
        return [r for r in self.rows if r["head"] == head]

    def mean(self, head: str | None = None) -> dict:
        """Arithmetic means per metric; ``head=None`` averages the per-head means."""
        if head is None:
            means = [self.mean(h) for h in HEADS]
            return {k: float(np.mean([m[k] for m in means])) for k in (*METRICS, "excluded", "empty_target")}
        rows = self.per_head(head)
        out = {}
        for k in METRICS:
            vals = np.array([r[k] for r in rows], dtype=float)
            vals = vals[~np.isnan(vals)]
            out[k] = float(vals.mean()) if len(vals) else float("nan")
        out["excluded"] = sum(1 for r in rows if np.isnan(r["hd95"]))
        out["empty_target"] = sum(1 for r in rows if r.get("_empty_target"))
        return out

    def to_csv(self) -> str:
        """One row per (frame, head), then ``mean`` footer rows per head and over heads.

        Footer rows put ``mean`` in ``seq_id`` and the excluded-frame count in ``frame``.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([r["seq_id"], r["frame"], r["head"], *(_fmt(r[k]) for k in METRICS)])
        for head in (*HEADS, "all"):
            m = self.mean(None if head == "all" else head)
            writer.writerow(["mean", _fmt(m["excluded"]), head, *(_fmt(m[k]) for k in METRICS)])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return "nan"
    return f"{v:.6f}"


def evaluate_dataset(model, stacks, threshold: float = THRESHOLD) -> MetricReport:
    """Threshold a model's probabilities on every stack and score both heads.

    ``model`` is any callable mapping a FrameStack to a MaskPair of
    probability maps.
    """
    report = MetricReport()
    for stack in stacks:
        pred = model(stack)
        for head, prob, target in zip(HEADS, pred, stack.target):
            t = np.asarray(target) > 0.5
            values = frame_metrics(binarize(prob, threshold), t)
            report.add(stack.seq_id, stack.frame_index, head, values)
            report.rows[-1]["_empty_target"] = not t.any()
    return report
