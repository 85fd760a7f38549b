"""Figures for reports: CKA heatmaps and per-arm accuracy bars."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cka import CkaReport  # noqa: E402


def cka_heatmap(report: CkaReport, path: str | Path, title: str = "") -> Path:
    """Layers on the y axis (embeddings at the bottom), variant pairs on x."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(report.pairs), 1.2 + 0.45 * len(report.layers)))
    im = ax.imshow(report.scores, origin="lower", aspect="auto", vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(report.pairs)), report.pairs, rotation=30, ha="right")
    ax.set_yticks(range(len(report.layers)), [str(layer) for layer in report.layers])
    ax.set_ylabel("layer")
    for k in range(len(report.layers)):
        for j in range(len(report.pairs)):
            v = report.scores[k, j]
            ax.text(j, k, f"{v:.2f}", ha="center", va="center",
                    color="black" if v > 0.6 else "white", fontsize=8)
    fig.colorbar(im, ax=ax, label="linear CKA")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def arm_bars(rows: Sequence[dict], path: str | Path, metric: str = "accuracy", title: str = "") -> Path:
    """Grouped bars: one group per downstream task, one bar per arm."""
    path = Path(path)
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    width = 0.8 / max(1, len(arms))
    fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(tasks), 3.2))
    for a, arm in enumerate(arms):
        values = [next((float(r[metric]) for r in rows if r["arm"] == arm and r["task"] == t), np.nan)
                  for t in tasks]
        ax.bar(np.arange(len(tasks)) + (a - (len(arms) - 1) / 2) * width, values, width, label=arm)
    ax.set_xticks(range(len(tasks)), tasks)
    ax.set_ylabel(metric)
    ax.legend(title="intermediate", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
