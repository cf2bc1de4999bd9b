# plots.py
"""Side figures: pretraining loss curve, per-group length histograms, lambda trade-off."""
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from io_utils import atomic_path  # noqa: E402

LOG = logging.getLogger("fairgen.plots")

COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"]


def _save(fig, path) -> Path:
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", dpi=120)
    plt.close(fig)
    LOG.info(f"Figure written: {path}")
    return Path(path)


def plot_loss_curve(curve: pd.DataFrame, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    if not curve.empty:
        ax.plot(curve["epoch"], curve["train_total"], color=COLORS[0], label="train")
        ax.plot(curve["epoch"], curve["valid_total"], color=COLORS[1], label="valid")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Total loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_length_histograms(hist: pd.DataFrame, path) -> Path:
    """One panel per world; one line per attribute value."""
    worlds = ["factual", "counterfactual"]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, world in zip(axes, worlds):
        sub = hist[hist["world"] == world]
        for c, (value, grp) in enumerate(sub.groupby("attribute")):
            share = grp["count"] / grp["count"].sum()
            ax.plot(grp["length"], share, color=COLORS[c % len(COLORS)], label=str(value))
        ax.set_title(world)
        ax.set_xlabel("Generated length (tokens)")
        ax.legend()
    axes[0].set_ylabel("Share of samples")
    fig.tight_layout()
    return _save(fig, path)


def plot_tradeoff(table: pd.DataFrame, path) -> Path:
    """Ind-CF and BLEU-1 ratios w.r.t. the lambda = 0 row."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(table["lam"], table["ind_cf_ratio"], marker="o", color=COLORS[0], label="Ind-CF ratio")
    ax.plot(table["lam"], table["bleu_ratio"], marker="s", color=COLORS[1], label="BLEU-1 ratio")
    ax.axhline(1.0, color="#999999", linewidth=0.8, linestyle="--")
    ax.set_xlabel("lambda")
    ax.set_ylabel("Ratio to lambda = 0")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
