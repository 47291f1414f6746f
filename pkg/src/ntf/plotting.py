"""Figures for reports: robustness curves and training loss curves.

Rendering uses the non-interactive Agg backend so the CLI works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import ALL  # noqa: E402

_AXIS_LABELS = {
    "blur": "Gaussian blur sigma",
    "jpeg": "JPEG quality",
    "noise": "Gaussian noise sigma",
    "scale": "scale factor",
}


def plot_robustness(report, path, metric="ap", families=None):
    """One panel per transform showing ``metric`` against severity for each family."""
    transforms = list(dict.fromkeys(r["transform"] for r in report.rows))
    if families is None:
        families = [f for f in dict.fromkeys(r["family"] for r in report.rows) if f != "natural"]
        families.append(ALL)
    fig, axes = plt.subplots(1, len(transforms), figsize=(3.6 * len(transforms), 3.2), squeeze=False)
    for ax, transform in zip(axes[0], transforms):
        for fam in families:
            xs, ys = report.curve(transform, fam, metric)
            if xs:
                ax.plot(xs, ys, marker="o", label=fam)
        if transform == "jpeg" or transform == "scale":
            ax.invert_xaxis()  # severity grows to the right
        ax.set_xlabel(_AXIS_LABELS.get(transform, transform))
        ax.set_ylabel(metric.upper())
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_family_bars(report, path, metric="ap"):
    """Bar chart of a clean-evaluation metric per family."""
    rows = [r for r in report.rows if r["transform"] == "none"]
    agg = [r for (t, _), r in report.aggregate.items() if t == "none"]
    rows = rows + agg
    names = [r["family"] for r in rows]
    vals = [r[metric] for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.2))
    ax.bar(names, vals, color="#4472a8")
    ax.set_ylabel(metric.upper())
    ax.set_ylim(0.0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_log(loss_log, path, columns=None):
    """Per-epoch means of each logged column, one line per column."""
    columns = columns or loss_log.columns
    epochs = [e["epoch"] for e in loss_log.epochs]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for c in columns:
        ax.plot(epochs, [e[c] for e in loss_log.epochs], label=c)
    ax.set_xlabel("epoch")
    ax.set_ylabel("per-anchor value")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
