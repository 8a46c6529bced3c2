"""Report figures written next to the CSV outputs (PNG via the Agg backend)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import boundary  # noqa: E402

HEAD_COLOURS = {"bolus": "tab:orange", "pharynx": "tab:cyan"}


def _read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> None:
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def training_curve(log_csv, out_png) -> None:
    """Loss curves and validation DSC per head against epoch."""
    rows = _read_csv(log_csv)
    epoch = [int(r["epoch"]) for r in rows]
    fig, (ax_loss, ax_dsc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epoch, [float(r["train_loss"]) for r in rows], label="train")
    ax_loss.plot(epoch, [float(r["val_loss"]) for r in rows], label="validation")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mixture loss")
    ax_loss.legend()
    for head in HEAD_COLOURS:
        ax_dsc.plot(epoch, [float(r[f"val_dsc_{head}"]) for r in rows], label=head, color=HEAD_COLOURS[head])
    ax_dsc.set_ylim(0, 1)
    ax_dsc.set_xlabel("epoch")
    ax_dsc.set_ylabel("validation DSC")
    ax_dsc.legend()
    fig.tight_layout()
    _save(fig, out_png)


def ablation_chart(table_csv, out_png, reference: dict | None = None) -> None:
    """Median DSC per snippet length, with the individual seeds as dots."""
    rows = _read_csv(table_csv)
    lengths = [int(r["length"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(lengths, [float(r["median_dsc"]) for r in rows], "o-", label="median over seeds")
    for r in rows:
        seeds = [float(v) for v in r["dsc_per_seed"].split(";") if v]
        ax.scatter([int(r["length"])] * len(seeds), seeds, color="grey", s=12, zorder=3)
    if reference:
        ks = sorted(reference)
        ax.plot(ks, [reference[k] for k in ks], "s--", color="tab:red", label="published reference")
    ax.set_xticks(lengths)
    ax.set_xlabel("snippet length t")
    ax.set_ylabel("test DSC")
    ax.legend()
    fig.tight_layout()
    _save(fig, out_png)


def overlay_figure(frames, preds, targets, titles, out_png, columns: int = 4) -> None:
    """Grid of centre frames with predicted (solid) and true (dotted) outlines.

    ``preds`` and ``targets`` are sequences of ``(2, H, W)`` binary arrays in
    head order bolus, pharynx.
    """
    n = len(frames)
    if n == 0:
        return
    columns = min(columns, n)
    rows = -(-n // columns)
    fig, axes = plt.subplots(rows, columns, figsize=(2.2 * columns, 2.3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for k in range(n):
        ax = axes.ravel()[k]
        ax.imshow(frames[k], cmap="gray", vmin=0, vmax=1)
        for h, head in enumerate(HEAD_COLOURS):
            colour = matplotlib.colors.to_rgba(HEAD_COLOURS[head])
            for mask, alpha in ((preds[k][h], 1.0), (targets[k][h], 0.45)):
                edge = boundary(np.asarray(mask) > 0)
                layer = np.zeros(edge.shape + (4,))
                layer[edge] = colour[:3] + (alpha,)
                ax.imshow(layer, interpolation="nearest")
        ax.set_title(titles[k], fontsize=7)
    fig.tight_layout()
    _save(fig, out_png)
