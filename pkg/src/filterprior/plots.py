"""Figure rendering for analysis and report artifacts.

All figures are written straight to files with the Agg backend; the
CSVs remain the canonical data, these are the human-readable views.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_cluster_means(means: np.ndarray, path) -> Path:
    """Montage of per-cluster mean filters as gray 3x3 grids."""
    k = means.shape[0]
    side = int(round(np.sqrt(means.shape[1])))
    cols = min(k, 5)
    rows = (k + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows))
    axes = np.atleast_1d(axes).ravel()
    for c in range(k):
        ax = axes[c]
        ax.imshow(means[c].reshape(side, side), cmap="gray", interpolation="nearest")
        ax.set_title(f"c{c}", fontsize=8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    for ax in axes[k:]:
        ax.set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_histogram(counts, path) -> Path:
    """Bar chart of per-cluster filter counts."""
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(counts.shape[0]), counts, color="#4878a8")
    ax.set_xlabel("cluster")
    ax.set_ylabel("filters")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_loss_curves(runs: dict, path) -> Path:
    """Train (solid) and test (dashed) loss per run over iterations.

    runs maps a run name to (iterations, train_losses, test_losses).
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (name, (its, tr, te)) in enumerate(sorted(runs.items())):
        color = f"C{i % 10}"
        ax.plot(its, tr, color=color, label=f"{name} train")
        ax.plot(its, te, color=color, linestyle="--", label=f"{name} test")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_gap_curves(runs: dict, path) -> Path:
    """test minus train loss per run over iterations.

    runs maps a run name to (iterations, gaps).
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (name, (its, gaps)) in enumerate(sorted(runs.items())):
        ax.plot(its, gaps, color=f"C{i % 10}", label=name)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("test loss - train loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
