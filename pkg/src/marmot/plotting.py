"""Report figures: training curves and ROC curves saved as PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (5.0, 3.6)
DPI = 100
# no "Software" chunk so identical inputs give identical bytes
_PNG_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_learning_curve(report, path) -> None:
    """Training loss per epoch, with validation accuracy on a twin axis when recorded."""
    epochs = [e.epoch + 1 for e in report.epochs]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(epochs, report.loss_curve, "o-", color="tab:blue", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    val = report.val_curve
    if any(v is not None for v in val):
        ax2 = ax.twinx()
        pts = [(x, v) for x, v in zip(epochs, val) if v is not None]
        ax2.plot([x for x, _ in pts], [v for _, v in pts], "s-", color="tab:orange", ms=3)
        ax2.set_ylabel("validation accuracy", color="tab:orange")
        ax2.set_ylim(0, 1.02)
    ax.set_title("learning curve")
    _save(fig, path)


def plot_roc(points, auc_value, path) -> None:
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=1)
    if points:
        ax.plot([p[0] for p in points], [p[1] for p in points], drawstyle="default", color="tab:red")
    label = "AUC undefined" if auc_value is None else f"AUC = {auc_value:.4f}"
    ax.set_title(label)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    _save(fig, path)
