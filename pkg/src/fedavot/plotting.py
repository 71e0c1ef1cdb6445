"""Loss-curve figures rendered next to the delimited experiment output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

ALGORITHM_LABELS = {
    "fedavg_full": "FedAvg (full participation)",
    "fedavg_k": "FedAvg (K per round)",
    "fedavot": "FedAVOT",
}

ALGORITHM_COLORS = {
    "fedavg_full": "tab:blue",
    "fedavg_k": "tab:orange",
    "fedavot": "tab:green",
}


def render_loss_curves(stats, path, log_scale: bool = False, title: str | None = None) -> None:
    """Plot per-round mean global loss with a +/- std band per algorithm."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for algorithm in stats.algorithms:
        mean = np.asarray(stats.mean_loss[algorithm])
        std = np.asarray(stats.std_loss[algorithm])
        rounds = np.arange(1, mean.size + 1)
        color = ALGORITHM_COLORS.get(algorithm)
        ax.plot(rounds, mean, label=ALGORITHM_LABELS.get(algorithm, algorithm), color=color)
        lower = mean - std
        if log_scale:
            # keep the band plottable on a log axis
            lower = np.maximum(lower, mean * 1e-2)
        ax.fill_between(rounds, lower, mean + std, alpha=0.2, color=color, linewidth=0)
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("global round")
    ax.set_ylabel("global loss")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
