"""Figures written next to the JSON outputs.  Uses the object API, no pyplot state."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

STYLE = {"linewidth": 1.5}
PALETTE = ["#1b6ca8", "#d1495b", "#66a182", "#edae49", "#5d576b"]


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_training(report, path) -> Path:
    """Train loss and dev accuracy per epoch."""
    fig = Figure(figsize=(7, 3))
    ax_loss, ax_acc = fig.subplots(1, 2)
    epochs = [r["epoch"] for r in report.records]
    ax_loss.plot(epochs, [r["train_loss"] for r in report.records], marker="o", color=PALETTE[0], **STYLE)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, [r["dev_acc"] for r in report.records], marker="o", color=PALETTE[1], **STYLE)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("dev accuracy")
    fig.suptitle(f"{report.method} training")
    return _save(fig, path)


def plot_increments(comparison: dict, path) -> Path:
    """Per-sample max loss increase, one box per model, one panel per reference."""
    refs = list(comparison)
    fig = Figure(figsize=(3.2 * len(refs) + 1, 3.4))
    axes = np.atleast_1d(fig.subplots(1, len(refs), sharey=True))
    for ax, ref in zip(axes, refs):
        names = sorted(comparison[ref])
        data, positive = [], False
        for name in names:
            vals = np.array([r["delta_loss_max"] for r in comparison[ref][name].rows
                             if not r["filtered"] and r["delta_loss_max"] is not None], dtype=float)
            vals = vals[np.isfinite(vals)]
            positive |= bool((vals > 0).any())
            data.append(vals if vals.size else np.array([np.nan]))
        box = ax.boxplot(data, patch_artist=True, showfliers=False)
        ax.set_xticks(range(1, len(names) + 1), names)
        for patch, color in zip(box["boxes"], PALETTE * 4):
            patch.set_facecolor(color)
            patch.set_alpha(0.6)
        if positive:
            ax.set_yscale("symlog", linthresh=1e-6)
        ax.set_title(f"eps searched on {ref}", fontsize=9)
    axes[0].set_ylabel("max loss increase")
    return _save(fig, path)


def plot_budgets(report, path) -> Path:
    """Histogram of the per-sample budgets used by an attack report."""
    eps = np.array([r["eps"] for r in report.rows if not r["filtered"]], dtype=float)
    fig = Figure(figsize=(4, 3))
    ax = fig.subplots()
    ax.hist(eps, bins=20, color=PALETTE[2])
    ax.set_xlabel("per-sample eps")
    ax.set_ylabel("samples")
    return _save(fig, path)
