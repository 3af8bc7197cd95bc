"""Report figures (rendered off-screen to PNG)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import TASKS  # noqa: E402

_COLORS = {"reconstruction": "tab:blue", "denoising": "tab:orange", "registration": "tab:green"}
# no timestamps / version strings in the PNG so reruns are byte-identical
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_report(report, path, title: str = "") -> None:
    """CD x1000 against perturbation level, one line per task."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for task in report.tasks():
        levels = sorted(lv for (t, lv) in report.cells if t == task)
        ax.plot(levels, [report.cells[(task, lv)]["cd"] * 1000 for lv in levels], "o-",
                color=_COLORS.get(task), label=task)
    ax.set_xlabel("level")
    ax.set_ylabel("CD x1000")
    ax.set_xticks(range(1, 6))
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_training(rows, path) -> None:
    """Training loss and held-out CD per epoch from metrics.csv rows (dicts)."""
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(epochs, [float(r["train_loss"]) for r in rows], "k-", label="train loss")
    for task, key in zip(TASKS, ("val_cd_rec", "val_cd_den", "val_cd_reg")):
        vals = np.array([float(r[key]) for r in rows])
        if np.isfinite(vals).any():
            ax.semilogy(epochs, vals, "--", color=_COLORS[task], label=f"val CD {task[:3]}")
    ax.set_xlabel("epoch")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def plot_projection(coords: np.ndarray, tasks: np.ndarray, path, explained=None) -> None:
    """2-D scatter of projected task features coloured by task."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for i, task in enumerate(TASKS):
        sel = np.asarray(tasks) == i
        if sel.any():
            ax.scatter(coords[sel, 0], coords[sel, 1], s=8, color=_COLORS[task], label=task)
    if explained is not None:
        ax.set_xlabel(f"PC1 ({explained[0]:.0%})")
        ax.set_ylabel(f"PC2 ({explained[1]:.0%})")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
