"""Figure rendering for the CLI report path.

Every function takes computed results and writes one PNG next to the
delimited outputs. The metrics module stays figure-free; this layer is the
only place matplotlib is imported. All figures use the Agg backend so runs
work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalResult, female_minus_male, importance_means

_META = {"Software": "tokmoe"}


def _save(fig, path: str | Path) -> None:
    fig.savefig(Path(path), dpi=120, bbox_inches="tight", metadata=_META)
    plt.close(fig)


def save_importance_figure(path: str | Path, result: EvalResult) -> None:
    """Grouped bars of mean token importance with the uniform baseline line."""
    means = importance_means(result)
    if not means:
        return
    names = result.token_names
    t = len(names)
    x = np.arange(t)
    groups = list(means)
    width = 0.8 / len(groups)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * t), 4.0))
    for i, g in enumerate(groups):
        ax.bar(x + (i - (len(groups) - 1) / 2) * width, means[g], width, label=g)
    ax.axhline(1.0 / t, color="gray", linestyle="--", linewidth=1,
               label=f"baseline 1/{t}")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("mean importance")
    ax.set_title("Token importance by group")
    ax.legend(fontsize=8)
    _save(fig, path)


def save_sex_difference_figure(path: str | Path, result: EvalResult) -> None:
    """Signed female-minus-male importance differences, sorted by magnitude."""
    diff = female_minus_male(importance_means(result))
    if diff is None:
        return
    order = np.argsort(-np.abs(diff))
    names = [result.token_names[i] for i in order]
    vals = diff[order]
    colors = ["#c0392b" if v >= 0 else "#2980b9" for v in vals]
    fig, ax = plt.subplots(figsize=(6.0, max(3.0, 0.35 * len(names))))
    ax.barh(np.arange(len(names)), vals, color=colors)
    ax.set_yticks(np.arange(len(names)))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.axvline(0.0, color="black", linewidth=1)
    ax.set_xlabel("female minus male mean importance")
    ax.set_title("Sex difference in token importance")
    _save(fig, path)


def save_expert_load_figure(path: str | Path, result: EvalResult) -> None:
    """Heatmap of mean gate mass per token and expert."""
    if result.gate_load is None:
        return
    load = result.gate_load
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * load.shape[1]),
                                    max(3.0, 0.35 * load.shape[0])))
    im = ax.imshow(load, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_xticks(np.arange(load.shape[1]))
    ax.set_xticklabels([f"expert {e}" for e in range(load.shape[1])])
    ax.set_yticks(np.arange(load.shape[0]))
    ax.set_yticklabels(result.token_names)
    ax.set_xlabel("expert")
    ax.set_title("Mean gate mass per token")
    fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)


def save_training_curve(path: str | Path, log_entries: list[dict]) -> None:
    """Mean loss per epoch with the learning rate on a twin axis."""
    if not log_entries:
        return
    epochs = [e["epoch"] for e in log_entries]
    losses = [e["mean_loss"] for e in log_entries]
    lrs = [e["lr"] for e in log_entries]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, losses, color="#2c3e50", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, lrs, color="#e67e22", linestyle="--", label="lr")
    ax2.set_ylabel("learning rate")
    ax.set_title("Training curve")
    _save(fig, path)


def save_ablation_figure(path: str | Path, rows: list[dict]) -> None:
    """Bar chart of test accuracy per architecture variant."""
    if not rows:
        return
    variants = [r["variant"] for r in rows]
    accs = [r["accuracy"] if isinstance(r["accuracy"], float) else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(variants)), 4.0))
    ax.bar(np.arange(len(variants)), accs, color="#16a085")
    ax.set_xticks(np.arange(len(variants)))
    ax.set_xticklabels(variants, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("test accuracy")
    ax.set_title("Ablation comparison")
    _save(fig, path)
