"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mfnrec",
}

# no Software/date tags, so reruns give identical bytes
_META = {"Software": None}


def figsize(scale=1.0):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * golden


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curves(curves: Mapping[str, Sequence[float]], path, window: int = 10) -> None:
    """Training loss per step, one line per run, with a moving average."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        for label, losses in curves.items():
            y = smooth(losses, window)
            x = np.arange(len(y)) + (len(losses) - len(y)) + 1
            ax.plot(x, y, lw=1.2, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel(f"train loss ({window}-step mean)" if window > 1 else "train loss")
        if len(curves) > 1:
            ax.legend(frameon=False)
        _save(fig, path)


def plot_comparison(rows, path) -> None:
    """Test AUC per variant: bars at the seed mean, dots for each seed."""
    variants = list(dict.fromkeys(r.variant for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        for i, v in enumerate(variants):
            aucs = [r.auc for r in rows if r.variant == v]
            ax.bar(i, np.mean(aucs), width=0.6, color="0.8", edgecolor="0.3")
            ax.plot(np.full(len(aucs), i), aucs, "o", ms=4, color="C0")
            ax.annotate(f"{np.mean([r.rela_impr_pct for r in rows if r.variant == v]):+.1f}%",
                        (i, np.mean(aucs)), textcoords="offset points", xytext=(0, 4), ha="center")
        lo = min(r.auc for r in rows)
        hi = max(r.auc for r in rows)
        pad = max(0.01, 0.15 * (hi - lo))
        ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + 2 * pad))
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=15)
        ax.set_ylabel("test AUC")
        ax.set_title("RelaImpr vs base (mean over seeds)")
        _save(fig, path)


def plot_center_history(histories: Mapping[str, Sequence[tuple[int, float]]], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        for label, hist in histories.items():
            it, val = zip(*hist)
            ax.plot(it, val, marker=".", lw=1.2, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("entropy loss on evaluation users")
        ax.legend(frameon=False)
        _save(fig, path)
