"""Report figures rendered next to the delimited outputs.

All functions write a PNG to the given path using the Agg backend; none
of them display anything.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def loss_curve(records, path: str | Path) -> None:
    """Per-epoch training loss with learning rate and prediction variance."""
    epochs = [r.epoch for r in records]
    fig, (ax_loss, ax_aux) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(epochs, [r.loss for r in records], marker=".", color="tab:blue")
    ax_loss.set_ylabel("mean loss")
    ax_loss.grid(alpha=0.3)
    ax_aux.plot(epochs, [r.lr for r in records], color="tab:orange", label="lr")
    ax_var = ax_aux.twinx()
    ax_var.semilogy(epochs, [max(r.pred_variance, 1e-12) for r in records],
                    color="tab:green", label="pred variance")
    ax_aux.set_xlabel("epoch")
    ax_aux.set_ylabel("learning rate")
    ax_var.set_ylabel("prediction variance")
    ax_aux.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def probe_accuracy(rows: list[dict], path: str | Path) -> None:
    """Mean accuracy with std error bars per shot count."""
    shots = sorted({r["shots"] for r in rows})
    means, stds = [], []
    for n in shots:
        accs = [r["accuracy"] for r in rows if r["shots"] == n]
        means.append(np.mean(accs))
        stds.append(np.std(accs))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(shots, means, yerr=stds, marker="o", capsize=4)
    ax.set_xlabel("shots per class")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def attention_distances(dist: np.ndarray, path: str | Path) -> None:
    """Per-head mean attention distance by encoder layer."""
    layers, heads = dist.shape
    fig, ax = plt.subplots(figsize=(6, 4))
    for h in range(heads):
        ax.scatter(np.arange(1, layers + 1), dist[:, h], s=24, alpha=0.8,
                   label=f"head {h}")
    ax.plot(np.arange(1, layers + 1), dist.mean(axis=1), color="k",
            linestyle="--", label="mean")
    ax.set_xlabel("encoder layer")
    ax.set_ylabel("mean attention distance (px)")
    ax.set_xticks(np.arange(1, layers + 1))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_curve(rows: list[dict], axis: str, path: str | Path) -> None:
    """Accuracy against one sweep axis."""
    ok = [r for r in rows if r.get("status") == "ok"]
    xs = [r[axis] for r in ok]
    means = [r["mean_accuracy"] for r in ok]
    stds = [r["std_accuracy"] for r in ok]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(xs, means, yerr=stds, marker="o", capsize=4)
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("top-1 accuracy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def feature_panel(img: np.ndarray, tf: np.ndarray, path: str | Path,
                  channel_names: list[str] | None = None) -> None:
    """Input image next to each target-feature channel."""
    channels = tf.shape[0]
    fig, axes = plt.subplots(1, channels + 1, figsize=(2.6 * (channels + 1), 3))
    axes = np.atleast_1d(axes)
    axes[0].imshow(img, cmap="gray")
    axes[0].set_title("input")
    for k in range(channels):
        axes[k + 1].imshow(tf[k], cmap="magma")
        name = channel_names[k] if channel_names else f"ch {k}"
        axes[k + 1].set_title(name)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
