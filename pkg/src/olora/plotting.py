"""Matplotlib figures written next to the CSV/JSON run outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp or version in the PNG so reruns give identical files
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_accuracy(report, path) -> Path:
    """Heat map of the lower-triangular accuracy matrix."""
    T = report.T
    grid = np.full((T, T), np.nan)
    for j, row in enumerate(report.acc):
        grid[j, :len(row)] = row
    names = report.task_names or [f"task{i}" for i in range(T)]
    fig, ax = plt.subplots(figsize=(1.2 * T + 2.5, 1.0 * T + 2))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    for j in range(T):
        for i in range(j + 1):
            ax.text(i, j, f"{grid[j, i]:.2f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_xticks(range(T), names, rotation=45, ha="right")
    ax.set_yticks(range(T), names)
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("after training")
    ax.set_title(f"accuracy (AA = {report.AA:.3f})")
    fig.colorbar(im, ax=ax)
    return _save(fig, Path(path))


def plot_train_log(train_log: list[dict], path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    x = np.arange(len(train_log))
    tasks = np.array([r["task_id"] for r in train_log])
    for t in np.unique(tasks):
        sel = tasks == t
        ax1.plot(x[sel], [r["nll"] for r, s in zip(train_log, sel) if s], marker=".", label=f"task {t}")
        ax2.plot(x[sel], [max(r["orth_loss"], 1e-12) for r, s in zip(train_log, sel) if s], marker=".")
    ax1.set_xlabel("epoch (global)")
    ax1.set_ylabel("mean NLL")
    ax1.legend(fontsize=8)
    ax2.set_yscale("log")
    ax2.set_xlabel("epoch (global)")
    ax2.set_ylabel("orthogonality loss")
    return _save(fig, Path(path))


def plot_loss_drift(drift, path) -> Path:
    edges = drift.bin_edges
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(edges[:-1], drift.counts[1:-1], width=width, align="edge", edgecolor="k", linewidth=0.3)
    lo, hi = int(drift.counts[0]), int(drift.counts[-1])
    ax.set_xlabel("loss change on past-task examples")
    ax.set_ylabel("count")
    ax.set_title(f"mean {drift.mean:+.4f}  (below range {lo}, above range {hi})")
    return _save(fig, Path(path))


def plot_hidden_drift(layers: list[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(layers)), layers)
    ax.set_xticks(range(len(layers)))
    ax.set_xlabel("layer")
    ax.set_ylabel("relative L2 drift")
    return _save(fig, Path(path))


def plot_sweep(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ranks = [r.rank for r in rows]
    means = [r.mean for r in rows]
    errs = [r.std or 0.0 for r in rows]
    ax.errorbar(range(len(rows)), means, yerr=errs, marker="o", capsize=3)
    ax.set_xticks(range(len(rows)), [str(r) for r in ranks])
    ax.set_xlabel("rank r")
    ax.set_ylabel("average accuracy")
    ax.set_ylim(0.0, 1.0)
    return _save(fig, Path(path))
