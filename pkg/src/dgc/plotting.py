"""Static figures: training curves, confusion heatmaps, Pacman scatters and
image grids. Rendering uses the Agg backend with fixed settings and no
timestamp metadata, so identical inputs give identical PNG bytes."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ConfusionMatrix  # noqa: E402

PNG_META = {"Software": None}
STYLE = {"figure.dpi": 100, "savefig.dpi": 100, "font.size": 9, "path.simplify": False,
         "axes.grid": False}
CLUSTER_COLORS = ("#e6b422", "#5b2a86", "#1f77b4", "#d62728", "#2ca02c", "#8c564b",
                  "#e377c2", "#7f7f7f", "#17becf", "#bcbd22")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return path


def _colors(labels) -> list:
    return [CLUSTER_COLORS[int(c) % len(CLUSTER_COLORS)] for c in labels]


def plot_training_curves(records: Sequence, path) -> Path:
    """Loss and clustering accuracy per epoch from TrainRecords."""
    if not records:
        raise ValueError("the training log holds no epoch records; nothing to plot")
    epochs = [r.epoch for r in records]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax_loss.plot(epochs, [r.loss for r in records], color="k")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("negative bound")
        for key, style in (("train_accuracy", "-"), ("test_accuracy", "--")):
            values = [getattr(r, key) for r in records]
            if any(v is not None for v in values):
                ax_acc.plot(epochs, [np.nan if v is None else v for v in values], style,
                            label=key.replace("_", " "))
        ax_acc.set_ylim(0, 1.02)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("clustering accuracy")
        if ax_acc.lines:
            ax_acc.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(matrix: ConfusionMatrix, path, *, title: Optional[str] = None) -> Path:
    """Heatmap with predicted clusters as rows and true clusters as columns."""
    counts = np.asarray(matrix.counts)
    if counts.size == 0:
        raise ValueError("empty confusion matrix")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.7 * counts.shape[1], 1.0 + 0.7 * counts.shape[0]))
        ax.imshow(counts, cmap="Blues", vmin=0, vmax=max(1, counts.max()))
        ax.set_xticks(range(counts.shape[1]), matrix.col_labels)
        ax.set_yticks(range(counts.shape[0]), matrix.row_labels)
        ax.set_xlabel("true cluster")
        ax.set_ylabel("predicted cluster")
        threshold = counts.max() / 2
        for (i, j), v in np.ndenumerate(counts):
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > threshold else "black")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_pacman(x, y, cluster, path_2d, path_3d=None, *, title: Optional[str] = None) -> list:
    """2-D inputs coloured by cluster, and optionally a 3-D view with responses."""
    x = np.asarray(x)
    y = np.asarray(y).reshape(len(x))
    colors = _colors(cluster)
    out = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(x[:, 0], x[:, 1], s=2, c=colors, linewidths=0)
        ax.set_aspect("equal")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        if title:
            ax.set_title(title)
        out.append(_save(fig, path_2d))
        if path_3d is not None:
            fig = plt.figure(figsize=(5, 4))
            ax = fig.add_subplot(projection="3d")
            ax.scatter(x[:, 0], x[:, 1], y, s=2, c=colors, linewidths=0)
            ax.view_init(elev=25, azim=-60)
            ax.set_xlabel("x1")
            ax.set_ylabel("x2")
            ax.set_zlabel("y")
            out.append(_save(fig, path_3d))
    return out


def plot_image_grid(images, path, *, n_cols: int = 10, labels=None) -> Path:
    """Grid of grayscale images in [0, 1]; ``labels`` become small titles."""
    images = np.asarray(images)
    if images.ndim == 2:
        side = int(round(np.sqrt(images.shape[1])))
        images = images.reshape(len(images), side, side)
    if len(images) == 0:
        raise ValueError("no images to plot")
    n_cols = min(n_cols, len(images))
    n_rows = -(-len(images) // n_cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(0.9 * n_cols, 0.95 * n_rows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for i, img in enumerate(images):
            ax = axes.flat[i]
            ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            if labels is not None:
                ax.set_title(str(labels[i]), fontsize=7)
        fig.tight_layout(pad=0.2)
        return _save(fig, path)
