"""Matplotlib rendering of the report outputs.

Every figure is drawn from the same rows that go into the tab-separated
tables, so external tooling can always reproduce them from the files alone.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = dict(dpi=120, metadata={"Software": None})  # keep bytes reproducible


def _boxes(ax, rows, xlabel):
    # rows: [group, min, q1, median, q3, max, count]
    stats = [dict(whislo=r[1], q1=r[2], med=r[3], q3=r[4], whishi=r[5],
                  fliers=[]) for r in rows]
    ax.bxp(stats, showfliers=False)
    ax.set_xticks(range(1, len(rows) + 1))
    ax.set_xticklabels([str(r[0]) for r in rows], rotation=60, fontsize=6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("popularity")


def render_stats(stats: dict, paths: dict):
    """Render category/user box plots and the influence density scatter."""
    fig, ax = plt.subplots(figsize=(8, 3.2))
    _boxes(ax, stats["category"], "category")
    fig.tight_layout()
    fig.savefig(paths["category"], **_SAVE_KW)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3.2))
    _boxes(ax, stats["user"], "user")
    fig.tight_layout()
    fig.savefig(paths["user"], **_SAVE_KW)
    plt.close(fig)

    pts = np.asarray(stats["influence"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    if len(pts):
        ax.hexbin(pts[:, 0], pts[:, 1], gridsize=40, cmap="viridis", mincnt=1)
    ax.set_xlabel("log2(1 + followers)")
    ax.set_ylabel("popularity")
    fig.tight_layout()
    fig.savefig(paths["influence"], **_SAVE_KW)
    plt.close(fig)


def render_projection(coords: np.ndarray, labels: np.ndarray, path: str):
    """2-D feature projection colored by popularity label."""
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=labels, s=6, cmap="plasma",
                    linewidths=0)
    fig.colorbar(sc, ax=ax, label="popularity")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_history(history, path: str):
    """Training curves: total/regression train loss and validation loss."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(epochs, [h["total"] for h in history], label="train total")
    ax.plot(epochs, [h["l_reg"] for h in history], label="train reg")
    ax.plot(epochs, [h["val_loss"] for h in history], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_ablation(rows, path: str):
    """Bar chart of test MAE per ablation row."""
    names = [r[0] for r in rows]
    maes = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 3.4))
    ax.bar(range(len(names)), maes, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("test MAE")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
