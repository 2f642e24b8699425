"""Matplotlib report rendering: every CSV the toolkit emits gets a figure
written next to it."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def loss_curves(losses_csv: Path | str, out_png: Path | str | None = None) -> Path:
    """Per-term loss curves from a long-format (step, term, value) CSV."""
    losses_csv = Path(losses_csv)
    out_png = Path(out_png) if out_png else losses_csv.with_suffix(".png")
    series: dict[str, tuple[list[int], list[float]]] = {}
    with open(losses_csv, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        for step, term, value in reader:
            xs, ys = series.setdefault(term, ([], []))
            xs.append(int(step))
            ys.append(float(value))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for term in sorted(series):
        if term in ("main", "disc"):
            continue
        xs, ys = series[term]
        ax.plot(xs, ys, label=term, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss term")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def metrics_history(metrics_csv: Path | str, out_png: Path | str | None = None) -> Path:
    metrics_csv = Path(metrics_csv)
    out_png = Path(out_png) if out_png else metrics_csv.with_suffix(".png")
    with open(metrics_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [int(r["epoch"]) for r in rows]
    for key in ("acc_y", "acc_z", "dis_y", "dis_z", "aggregated"):
        ys = [float(r[key]) if r.get(key) not in (None, "", "None") else np.nan for r in rows]
        ax.plot(epochs, ys, label=key, marker=".", linewidth=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 102)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def grid_figure(grid_csv: Path | str, out_png: Path | str | None = None) -> Path:
    """Grouped bars per preset across the four scores plus the aggregate."""
    grid_csv = Path(grid_csv)
    out_png = Path(out_png) if out_png else grid_csv.with_suffix(".png")
    with open(grid_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    keys = ("acc_y", "acc_z", "dis_y", "dis_z", "aggregated")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(keys))
    for i, row in enumerate(rows):
        vals = [float(row[k]) if row.get(k) not in (None, "", "None") else 0.0 for k in keys]
        ax.bar(x + i * width, vals, width, label=row.get("preset", f"run {i}"))
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(keys)
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def edit_sweep_grid(
    images: Sequence[Sequence[np.ndarray]],
    row_labels: Sequence[str],
    col_labels: Sequence[str],
    out_png: Path | str,
) -> Path:
    """Attributes-by-magnitudes image grid (rows: attributes, cols: epsilon)."""
    out_png = Path(out_png)
    n_rows, n_cols = len(images), max(len(r) for r in images)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.1 * n_cols, 1.2 * n_rows), squeeze=False)
    for i, row in enumerate(images):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(row):
                img = row[j]
                ax.imshow(img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0), cmap="gray", vmin=0, vmax=1)
            if i == 0 and j < len(col_labels):
                ax.set_title(col_labels[j], fontsize=7)
        axes[i][0].set_ylabel(row_labels[i], fontsize=7)
        axes[i][0].axis("on")
        axes[i][0].set_xticks([])
        axes[i][0].set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def augmentation_trend(trend_csv: Path | str, out_png: Path | str | None = None) -> Path:
    trend_csv = Path(trend_csv)
    out_png = Path(out_png) if out_png else trend_csv.with_suffix(".png")
    with open(trend_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot([int(r["n_gen"]) for r in rows], [float(r["accuracy"]) for r in rows], marker="o")
    ax.set_xlabel("generated images per class")
    ax.set_ylabel("identity accuracy (%)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
