"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curve(losses: Sequence[float], path: str | Path, title: str = "training loss",
                    lrs: Sequence[float] | None = None) -> Path:
    """Raw and smoothed loss per step; learning rate on a twin axis when given."""
    losses = np.asarray(losses, dtype=float)
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        steps = np.arange(losses.size)
        ax.plot(steps, losses, color="0.75", lw=0.8, label="loss")
        window = max(1, losses.size // 50)
        sm = _smooth(losses, window)
        if sm.size != losses.size:
            ax.plot(steps[window - 1:], sm, color="C0", lw=1.4, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        if lrs is not None:
            ax2 = ax.twinx()
            ax2.plot(steps, np.asarray(lrs, dtype=float), color="C1", lw=0.8, ls="--")
            ax2.set_ylabel("learning rate", color="C1")
            ax2.spines["top"].set_visible(False)
        ax.legend(loc="upper right", frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_ablation(rows: Sequence[dict], path: str | Path, metric: str = "auc") -> Path:
    """Median metric per arm with the seed spread as error bars and seeds as dots."""
    path = Path(path)
    names = [r["arm"] for r in rows]
    med = np.array([np.nan if r["median"] is None else r["median"] for r in rows], dtype=float)
    spread = np.array([0.0 if r["std"] is None else r["std"] for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.4))
        x = np.arange(len(rows))
        ax.bar(x, med, yerr=spread, color="C0", alpha=0.7, capsize=3)
        for i, r in enumerate(rows):
            vals = [v for v in r["values"] if v is not None]
            ax.scatter(np.full(len(vals), i), vals, s=10, color="k", zorder=3)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=25, ha="right")
        ax.set_ylabel(f"test {metric}")
        ax.set_ylim(0.0, 1.0)
        ax.axhline(0.5 if metric == "auc" else 0.0, color="0.6", lw=0.8, ls=":")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
