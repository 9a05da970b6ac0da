"""Report writers: line-delimited JSON records, CSV tables, and figures.

Every CLI report path writes machine-readable output (JSONL / CSV) plus a
rendered matplotlib figure next to it.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_jsonl(path: str | Path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path: str | Path, rows: list[dict], fieldnames=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not fieldnames:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _new_fig(width=6.0, height=3.6):
    return plt.subplots(figsize=(width, height), dpi=120)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def fig_cost_comparison(reports, path: str | Path) -> Path:
    """Grouped log-scale bars of parameters and FLOPs per variant."""
    names = [r.variant for r in reports]
    params = [max(r.total_params, 1) for r in reports]
    flops = [max(r.total_flops, 1) for r in reports]
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.6), dpi=120)
    for ax, vals, title in ((axes[0], params, "parameters"),
                            (axes[1], flops, "FLOPs / forward")):
        ax.bar(names, vals, color="#4878a8")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=30)
        ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def fig_flops_scaling(scaling: dict[str, list[tuple[int, int]]], path) -> Path:
    """Log-log attention-term FLOPs vs token count per variant."""
    fig, ax = _new_fig()
    for name, pts in scaling.items():
        ns = [p[0] for p in pts]
        fl = [p[1] for p in pts]
        ax.loglog(ns, fl, marker="o", label=name)
    ax.set_xlabel("tokens N")
    ax.set_ylabel("attention-term FLOPs")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return _save(fig, path)


def fig_training_curves(records, path) -> Path:
    steps = [r.step for r in records]
    fig, ax = _new_fig()
    ax.plot(steps, [r.loss for r in records], color="#a84848", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy loss", color="#a84848")
    ax2 = ax.twinx()
    ax2.plot(steps, [r.miou for r in records], color="#4878a8", label="mIoU")
    ax2.set_ylabel("mIoU", color="#4878a8")
    ax2.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def fig_gradcheck(records, path) -> Path:
    """Max relative error per parameter group (log scale) with tolerance."""
    groups = [r.group for r in records]
    errs = [max(r.max_rel, 1e-18) for r in records]
    tol = records[0].tol if records else 1e-6
    fig, ax = plt.subplots(figsize=(8.0, max(3.0, 0.06 * len(groups))), dpi=120)
    ax.barh(range(len(groups)), errs, color="#4878a8")
    ax.axvline(tol, color="#a84848", linestyle="--", label=f"tol {tol:g}")
    ax.set_xscale("log")
    ax.set_yticks([])
    ax.set_xlabel("max relative error per parameter group")
    ax.legend()
    return _save(fig, path)


def fig_scene(scene, path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.2), dpi=120)
    axes[0].imshow(scene.rgb.data)
    axes[0].set_title("rgb")
    axes[1].imshow(scene.depth.data[:, :, 0], cmap="viridis")
    axes[1].set_title("depth")
    axes[2].imshow(scene.labels.labels, cmap="tab10",
                   vmin=0, vmax=max(9, scene.labels.labels.max()))
    axes[2].set_title("labels")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def fig_confusion(cm, path) -> Path:
    fig, ax = _new_fig(4.2, 3.8)
    im = ax.imshow(cm.counts, cmap="Blues")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("ground-truth class")
    k = cm.num_classes
    if k <= 12:
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                        fontsize=7,
                        color="white" if cm.counts[i, j] > cm.counts.max() / 2 else "black")
    return _save(fig, path)
