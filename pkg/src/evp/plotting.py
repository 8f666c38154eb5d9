"""Matplotlib figures for the command-line reports (rendered off-screen to files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _to_rgb(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.transpose(1, 2, 0)
        if image.shape[-1] == 1:
            image = image[..., 0]
    return image


def _stretch(x):
    lo, hi = float(np.min(x)), float(np.max(x))
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def decomposition_figure(path, image, hfc, lfc, mask_h, mask_l, tau):
    """Input, both frequency masks and both filtered images in one row."""
    fig, axes = plt.subplots(1, 5, figsize=(15, 3.4))
    panels = [
        ("input", _to_rgb(image), None),
        (f"high-pass mask (tau={tau:g})", mask_h, "gray"),
        ("high-frequency component", _stretch(_to_rgb(np.abs(hfc))), "gray" if np.ndim(hfc) == 2 else None),
        (f"low-pass mask (tau={tau:g})", mask_l, "gray"),
        ("low-frequency component", np.clip(_to_rgb(lfc), 0, 1), "gray" if np.ndim(lfc) == 2 else None),
    ]
    for ax, (title, data, cmap) in zip(axes, panels):
        ax.imshow(data, cmap=cmap, vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_figure(path, records):
    """Per-epoch training loss, one line per run record."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rec in records:
        ax.plot(np.arange(1, len(rec.epoch_losses) + 1), rec.epoch_losses, label=rec.strategy)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def comparison_figure(path, records, metric="f_beta", dataset="test"):
    """Bar chart of one test metric per strategy, annotated with trainable counts."""
    labels = [r.strategy for r in records]
    values = [r.metrics.get(dataset, {}).get(metric, np.nan) for r in records]
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(records)), 4))
    bars = ax.bar(np.arange(len(records)), values, color="tab:blue")
    for bar, rec in zip(bars, records):
        height = bar.get_height()
        ax.annotate(f"{rec.trainable:,}", (bar.get_x() + bar.get_width() / 2, 0 if np.isnan(height) else height),
                    ha="center", va="bottom", fontsize=7)
    ax.set_xticks(np.arange(len(records)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(f"{dataset} {metric}")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
