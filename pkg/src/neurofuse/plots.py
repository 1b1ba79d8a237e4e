"""Report figures: confusion heatmaps, loss traces, condition bars.

Everything renders to files through the Agg backend; no interactive
windows. Figure builders take plain data (matrices, traces, reports) and
return the Figure so tests can assert on axes content before saving.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import LABELS
from .metrics import CONDITIONS

plt.rcParams.update({
    "figure.dpi": 100,
    "font.size": 10,
    "axes.grid": False,
    "savefig.bbox": "tight",
})


def save_figure(fig, path, dpi=150):
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def confusion_figure(counts, title="Confusion matrix"):
    """Heatmap of a 3x3 confusion matrix with per-cell counts."""
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(LABELS)), LABELS)
    ax.set_yticks(range(len(LABELS)), LABELS)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    threshold = counts.max() / 2 if counts.max() > 0 else 0.5
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            color = "white" if counts[i, j] > threshold else "black"
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center", color=color)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return fig


def loss_figure(traces_by_name, title="Training loss"):
    """One line per named trace (e.g. fold or modality); x = epoch."""
    fig, ax = plt.subplots(figsize=(4.6, 3.0))
    for name in sorted(traces_by_name):
        losses = traces_by_name[name]
        ax.plot(range(len(losses)), losses, label=str(name), linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    if traces_by_name:
        ax.legend(fontsize=8)
    return fig


def accuracy_figure(reports_by_condition, title="Accuracy by input condition"):
    """Bar per condition in the canonical column order; missing = no bar."""
    conditions = [c for c in CONDITIONS if c in reports_by_condition]
    values = [reports_by_condition[c].accuracy for c in conditions]
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    bars = ax.bar(range(len(conditions)), values, color="#4878a8")
    ax.set_xticks(range(len(conditions)), conditions)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    for rect, value in zip(bars, values):
        ax.text(rect.get_x() + rect.get_width() / 2, value + 0.01, f"{value:.3f}",
                ha="center", va="bottom", fontsize=8)
    return fig
