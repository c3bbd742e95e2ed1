"""PNG figures for training and evaluation runs (matplotlib, headless)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import EvalReport, HistoryRow  # noqa: E402


def plot_loss_history(history: Sequence[HistoryRow], path, smooth: int = 10) -> None:
    """Per-iteration loss with a trailing moving average, log-scaled."""
    it = np.array([h.iteration for h in history])
    loss = np.array([h.loss for h in history])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, loss, lw=0.8, alpha=0.5, label="batch MPJPE")
    if len(loss) >= smooth > 1:
        avg = np.convolve(loss, np.ones(smooth) / smooth, mode="valid")
        ax.plot(it[smooth - 1:], avg, lw=1.5, label=f"mean of {smooth}")
    if np.all(loss > 0):
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("MPJPE (mm)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_eval(report: EvalReport, path) -> None:
    """Grouped bars of model vs zero-velocity MPJPE per horizon."""
    x = np.arange(len(report.horizons))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, [report.model[h] for h in report.horizons], 0.4, label="AGN")
    ax.bar(x + 0.2, [report.baseline[h] for h in report.horizons], 0.4, label="zero velocity")
    ax.set_xticks(x, [f"{report.ms(h):g} ms" for h in report.horizons])
    ax.set_ylabel("MPJPE (mm)")
    ax.set_title(f"{report.n_samples} windows", fontsize=9)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
