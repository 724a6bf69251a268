"""Matplotlib figures rendered next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import CSV_COLUMNS, MetricReport  # noqa: E402


def save_training_curves(rows: list[dict], path) -> Path:
    """Loss and learning-rate curves from the per-epoch log rows."""
    path = Path(path)
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(epochs, [r["train_loss"] for r in rows], label="train")
    ax_loss.plot(epochs, [r["val_loss"] for r in rows], label="validation")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(alpha=0.3)
    ax_lr.semilogy(epochs, [r["lr"] for r in rows], color="tab:green")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("epoch")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_summary(report: MetricReport, path) -> Path:
    """Box plot of per-image metrics with the aggregate marked."""
    path = Path(path)
    names = CSV_COLUMNS[1:]
    columns = list(zip(*[entry.values() for _, _, entry in report.rows]))
    agg = report.aggregate()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot(columns, tick_labels=names, showfliers=True)
    ax.plot(range(1, len(names) + 1), agg.values(), "d", color="tab:red",
            label="mean over images")
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("score")
    ax.grid(alpha=0.3, axis="y")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
