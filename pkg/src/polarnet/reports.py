"""Matplotlib report figures written next to the delimited outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .grids import PROJECTIONS, QUADRANTS, RINGS  # noqa: E402

_SAVE_OPTS = {"dpi": 110, "metadata": {"Software": None}}  # byte-stable PNGs

METRIC_KEYS = ("ACC", "AUROC", "Kappa")


def save_training_curves(payload, path):
    """Loss and training accuracy per fold."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for fold in payload["folds"]:
        axes[0].plot(fold["loss"], label=f"fold {fold['fold']}")
        axes[1].plot(fold["train_acc"], label=f"fold {fold['fold']}")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("weighted cross-entropy")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("training accuracy")
    axes[1].set_ylim(0, 1.02)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def write_metrics_csv(fold_rows, summary, path):
    """Per-fold metric table plus mean/std rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold"] + list(METRIC_KEYS))
        for row in fold_rows:
            writer.writerow([row["fold"]] + [f"{row[k]:.6f}" for k in METRIC_KEYS])
        writer.writerow(["mean"] + [f"{summary[k]['mean']:.6f}" for k in METRIC_KEYS])
        writer.writerow(["std"] + [f"{summary[k]['std']:.6f}" for k in METRIC_KEYS])


def save_eval_figure(fold_rows, summary, path):
    """Mean +/- std bars with per-fold points overlaid."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    xs = np.arange(len(METRIC_KEYS))
    means = [summary[k]["mean"] for k in METRIC_KEYS]
    stds = [summary[k]["std"] for k in METRIC_KEYS]
    ax.bar(xs, means, yerr=stds, capsize=4, color="#6699cc", alpha=0.8)
    for i, key in enumerate(METRIC_KEYS):
        vals = [row[key] for row in fold_rows]
        ax.plot([i] * len(vals), vals, "k.", ms=5)
    ax.set_xticks(xs, METRIC_KEYS)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score (mean +/- std over folds)")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_importance_figure(heatmaps, matrices, path):
    """One panel per projection heatmap plus annotated matrix tables.

    heatmaps: {name: HeatmapImage}; matrices: {name: ImportanceMatrix}.
    """
    names = [p for p in PROJECTIONS if p in heatmaps]
    extra = [n for n in heatmaps if n not in names]
    cols = names + extra
    fig, axes = plt.subplots(2, len(cols), figsize=(3.0 * len(cols), 6.2),
                             squeeze=False)
    for j, name in enumerate(cols):
        ax = axes[0][j]
        ax.imshow(heatmaps[name].rgb)
        ax.set_title(name, fontsize=10)
        ax.set_axis_off()
        ax = axes[1][j]
        imp = matrices.get(name)
        if imp is None:
            ax.set_axis_off()
            continue
        mat = imp.matrix
        im = ax.imshow(mat, cmap="coolwarm", aspect="auto")
        ax.set_xticks(range(mat.shape[1]),
                      list(RINGS)[:mat.shape[1]], fontsize=8)
        ax.set_yticks(range(mat.shape[0]),
                      list(QUADRANTS)[:mat.shape[0]], fontsize=8)
        for (r, c), val in np.ndenumerate(mat):
            ax.text(c, r, f"{val:.3g}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_grid_figure(label_map, names, path):
    """Indexed region map with a legend."""
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(label_map, cmap="tab10", interpolation="nearest")
    ax.set_axis_off()
    cbar = fig.colorbar(im, ax=ax, ticks=range(len(names) + 1))
    cbar.ax.set_yticklabels(["bg"] + list(names), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
