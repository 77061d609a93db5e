"""Static figures written next to the CSV outputs of ``bench``, ``report`` and ``train``."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rtf(records, path, title: str = "Real-time factor vs frame size"):
    """Log-log RTF curves, one line per model, with the real-time threshold."""
    by_model = defaultdict(list)
    for r in records:
        by_model[r.model].append(r)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, rs in sorted(by_model.items()):
        rs.sort(key=lambda r: r.frame_size)
        ax.plot([r.frame_size for r in rs], [r.rtf for r in rs], marker="o", label=name)
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("frame size F (samples)")
    ax.set_ylabel("RTF")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_metric_boxes(rows, path, group: str = "architecture"):
    """One box-plot panel per metric from long-format rows."""
    metrics = sorted({r["metric"] for r in rows})
    if not metrics:
        return None
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        groups = defaultdict(list)
        for r in rows:
            if r["metric"] == metric:
                groups[r[group]].append(float(r["value"]))
        names = sorted(groups)
        ax.boxplot([groups[n] for n in names])
        ax.set_xticks(range(1, len(names) + 1), names, rotation=45, ha="right", fontsize=7)
        ax.set_title(metric)
    return _save(fig, path)


def plot_training(epochs: list[dict], path):
    """Train/validation scaled loss and learning rate per epoch."""
    if not epochs:
        return None
    ep = [int(e["epoch"]) for e in epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ep, [float(e["train_scaled"]) for e in epochs], label="train (scaled)")
    ax.plot(ep, [float(e["val_scaled"]) for e in epochs], label="val (scaled)")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.step(ep, [float(e["lr"]) for e in epochs], color="gray", lw=0.8, where="post")
    ax2.set_yscale("log")
    ax2.set_ylabel("learning rate")
    ax.legend(fontsize=8)
    return _save(fig, path)
