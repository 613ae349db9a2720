"""Report figures rendered next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2
FIG_WIDTH = 4.5

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}

LOSS_COLOR = "#2b8cbe"
MAP_COLOR = "#941b22"


def _figure(ncols=1):
    return plt.subplots(1, ncols, figsize=(FIG_WIDTH * ncols, FIG_WIDTH * GOLDEN))


def plot_history(rows: Sequence[dict], path, title: str | None = None) -> Path:
    """Train loss (left axis, log scale) and validation mAP (right axis) per epoch."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["train_loss"] for r in rows], color=LOSS_COLOR, label="train loss")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss", color=LOSS_COLOR)
        val = [(r["epoch"], r["val_map"]) for r in rows if r.get("val_map") is not None]
        if val:
            ax2 = ax.twinx()
            ax2.spines["right"].set_visible(True)
            ax2.plot(*zip(*val), color=MAP_COLOR, marker="o", markevery=max(1, len(val) // 10),
                     label="val mAP")
            ax2.set_ylabel("validation mAP", color=MAP_COLOR)
            ax2.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_sweep(results: Sequence[tuple[dict, float]], key: str, path,
               log_x: bool | None = None, title: str | None = None) -> Path:
    """mAP against one swept parameter; other swept keys become separate lines."""
    path = Path(path)
    groups: dict[tuple, list[tuple[float, float]]] = {}
    for cfg, value in results:
        rest = tuple((k, cfg[k]) for k in ("tau", "nodes_per_graph", "filter_dim")
                     if k != key and k in cfg)
        groups.setdefault(rest, []).append((cfg[key], value))
    xs = [cfg[key] for cfg, _ in results]
    if log_x is None:
        log_x = min(xs) > 0 and max(xs) / min(xs) >= 20
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for rest, pts in sorted(groups.items()):
            pts.sort()
            label = ", ".join(f"{k}={v}" for k, v in rest) or None
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        best_cfg, best = max(results, key=lambda r: r[1])
        ax.axhline(best, color="0.6", linestyle="dashed", linewidth=0.8)
        if log_x:
            ax.set_xscale("log")
        ax.set_xticks(sorted(set(xs)))
        ax.set_xticklabels([f"{x:g}" for x in sorted(set(xs))])
        ax.set_xlabel(key)
        ax.set_ylabel("validation mAP")
        if len(groups) > 1:
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_scores(scores, labels, path, bins: int = 30) -> Path:
    """Score histograms of positive and negative nodes."""
    path = Path(path)
    s = np.asarray(scores)
    y = np.asarray(labels).astype(bool)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        edges = np.linspace(0, 1, bins + 1)
        ax.hist(s[~y], bins=edges, alpha=0.6, color=LOSS_COLOR, label="not speaking")
        ax.hist(s[y], bins=edges, alpha=0.6, color=MAP_COLOR, label="speaking")
        ax.set_xlabel("score")
        ax.set_ylabel("nodes")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path
