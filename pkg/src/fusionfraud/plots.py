"""Figure rendering for the report paths (training curves, confusion
heatmaps, ablation bars). All figures go straight to files; the Agg
backend is forced so headless runs never touch a display."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(histories, path) -> None:
    """Train/validation loss and validation F1 per epoch, one line per fold."""
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(10, 4))
    for i, hist in enumerate(histories):
        epochs = [e.epoch for e in hist.entries]
        ax_loss.plot(epochs, [e.train_loss for e in hist.entries],
                     alpha=0.8, label=f"fold {i} train")
        ax_loss.plot(epochs, [e.val_loss for e in hist.entries],
                     alpha=0.8, linestyle="--", label=f"fold {i} val")
        ax_f1.plot(epochs, [e.val_f1 for e in hist.entries], alpha=0.8, label=f"fold {i}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("binary cross-entropy")
    ax_loss.set_title("loss")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("validation F1")
    ax_f1.set_ylim(0.0, 1.0)
    ax_f1.set_title("validation F1")
    if len(histories) <= 3:
        ax_loss.legend(fontsize=7)
    ax_f1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_confusion_heatmap(cm, path, title="confusion matrix") -> None:
    """2x2 heatmap with counts; rows are actual, columns predicted."""
    grid = np.array([[cm.tn, cm.fp], [cm.fn, cm.tp]], dtype=float)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(grid, cmap="Blues")
    for (i, j), val in np.ndenumerate(grid):
        color = "white" if val > grid.max() / 2 else "black"
        ax.text(j, i, f"{int(val)}", ha="center", va="center", color=color, fontsize=14)
    ax.set_xticks([0, 1], ["legit", "fraud"])
    ax.set_yticks([0, 1], ["legit", "fraud"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_bars(report, path) -> None:
    """Mean F1 with std error bars per variant, in canonical row order."""
    names = [row.variant.display_name for row in report.rows]
    means = [100 * row.mean["f1"] for row in report.rows]
    stds = [100 * row.std["f1"] for row in report.rows]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.8))
    y = np.arange(len(names))
    ax.barh(y, means, xerr=stds, color="#4878a8", capsize=3)
    ax.set_yticks(y, names)
    ax.invert_yaxis()
    ax.set_xlabel("F1 (%), mean ± std across folds")
    ax.set_xlim(0, 100)
    ax.set_title(f"ablation, {report.k}-fold cross-validation")
    for yi, m in zip(y, means):
        ax.text(m + 1.2, yi, f"{m:.1f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
