"""Matplotlib figures written next to the CSV/PGM outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.4, 4.8)
DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_confusion(confusion: np.ndarray, classes: Sequence[str], path, title: str | None = None) -> Path:
    """Row-normalized confusion heatmap with raw counts annotated."""
    cm = np.asarray(confusion)
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    k = len(classes)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * k + 2), max(3.5, 0.6 * k + 1.5)))
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(k), classes, rotation=45, ha="right")
    ax.set_yticks(range(k), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_activation_maps(maps: Mapping[int, np.ndarray], path, image: np.ndarray | None = None) -> Path:
    panels = ([("input", image)] if image is not None else []) + [(f"layer {i}", m) for i, m in maps.items()]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4), squeeze=False)
    for ax, (label, m) in zip(axes[0], panels):
        if m.ndim == 3:
            ax.imshow(np.clip(m, 0, 1))
        else:
            ax.imshow(m, cmap="jet", vmin=0, vmax=1, interpolation="bilinear")
        ax.set_title(label, fontsize=9)
        ax.set_axis_off()
    return _save(fig, path)


def plot_losses(curves: Mapping[str, Sequence[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, losses in curves.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    if len(curves) > 1:
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    """GMAC versus parameter count for every ablation variant."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for row in rows:
        marker = "*" if row.direct else "o"
        ax.scatter(row.params / 1e6, row.gmacs, marker=marker, s=60 if row.direct else 30)
        tag = f"({row.l1},{row.l2}) r={row.r}" + (" direct" if row.direct else "")
        ax.annotate(tag, (row.params / 1e6, row.gmacs), textcoords="offset points", xytext=(4, 3), fontsize=7)
    ax.set_xlabel("parameters [M]")
    ax.set_ylabel("GMAC")
    return _save(fig, path)
