"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(epoch_losses: Sequence[float], path: str | Path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        epochs = np.arange(1, len(epoch_losses) + 1)
        ax.plot(epochs, epoch_losses, color="tab:blue", lw=1.5)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean DiceCE loss")
        ax.set_yscale("log")
        ax.grid(alpha=0.3, which="both")
        return _save(fig, path)


def plot_stage_metrics(stage_dsc: Sequence[float], stage_iou: Sequence[float], path: str | Path) -> Path:
    """Mean DSC and IoU against refinement stage (stage 1 is the first click)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        stages = np.arange(1, len(stage_dsc) + 1)
        ax.plot(stages, stage_dsc, "o-", label="DSC", color="tab:red")
        ax.plot(stages, stage_iou, "s--", label="IoU", color="tab:gray")
        ax.set_xlabel("refinement stage")
        ax.set_ylabel("mean score")
        ax.set_ylim(0.0, 1.02)
        ax.set_xticks(stages)
        ax.legend(frameon=False, loc="lower right")
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, path: str | Path) -> Path:
    """Central slices along each axis with ground-truth and predicted contours.

    All arrays are 3-D ``(X, Y, Z)``.
    """
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6))
        centers = [n // 2 for n in image.shape]
        for axis, ax in enumerate(axes):
            take = lambda a: np.take(a, centers[axis], axis=axis)  # noqa: E731
            ax.imshow(take(image).T, cmap="gray", origin="lower")
            if take(gt).any():
                ax.contour(take(gt).T.astype(float), levels=[0.5], colors="lime", linewidths=0.8)
            if take(pred).any():
                ax.contour(take(pred).T.astype(float), levels=[0.5], colors="red", linewidths=0.8)
            ax.set_title("XYZ"[axis] + f" = {centers[axis]}")
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
