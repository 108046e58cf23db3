"""Figures for single runs and evaluation reports (headless backend).

Per-run trajectory figures show the scheduling internals over time:
objective weights, guidance gradient norm, recurrence budget, losses,
and a strip of intermediate clean predictions. Report figures are bar
charts of per-variant metric means with standard-deviation bars.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .records import RunRecord  # noqa: E402

REPORT_METRICS = ("preference_score", "detector_pass_rate", "nfe")


def _strip_axes(fig, n: int, bottom_frac: float = 0.22):
    axes = []
    if n == 0:
        return axes
    width = 0.9 / n
    for i in range(n):
        ax = fig.add_axes([0.05 + i * width, 0.02, width * 0.92, bottom_frac - 0.05])
        ax.set_xticks([])
        ax.set_yticks([])
        axes.append(ax)
    return axes


def plot_run_trajectory(record: RunRecord, out_path: str | Path) -> Path:
    """2x2 scheduling panels plus a strip of clean-prediction snapshots."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    steps = record.steps
    ts = [s.t for s in steps]
    has_strip = bool(record.snapshots)
    bottom = 0.22 if has_strip else 0.0

    fig = plt.figure(figsize=(10, 8 if has_strip else 6.5))
    grid = fig.add_gridspec(
        2, 2, left=0.08, right=0.97, top=0.92, bottom=bottom + 0.08, hspace=0.45, wspace=0.3
    )

    ax = fig.add_subplot(grid[0, 0])
    ax.plot(ts, [s.w_semantic for s in steps], label="semantic weight")
    ax.plot(ts, [s.w_preference for s in steps], label="preference weight")
    ax.set_xlabel("t")
    ax.set_ylabel("weight")
    ax.set_title("objective weights")
    ax.invert_xaxis()
    ax.legend(fontsize=8)

    ax = fig.add_subplot(grid[0, 1])
    pairs = [(s.t, s.grad_norm) for s in steps if s.grad_norm is not None]
    if pairs:
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs])
        if all(p[1] > 0 for p in pairs):
            ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("||g||")
    ax.set_title("guidance gradient norm")
    ax.invert_xaxis()

    ax = fig.add_subplot(grid[1, 0])
    ax.step(ts, [s.r_t for s in steps], where="mid")
    ax.set_xlabel("t")
    ax.set_ylabel("recurrence count")
    ax.set_title("time-travel budget")
    ax.invert_xaxis()

    ax = fig.add_subplot(grid[1, 1])
    for attr, label in (("l_semantic", "semantic loss"), ("l_preference", "preference loss")):
        pts = [(s.t, getattr(s, attr)) for s in steps if getattr(s, attr) is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("loss")
    ax.set_title("objective values")
    ax.invert_xaxis()
    ax.legend(fontsize=8)

    if has_strip:
        snaps = sorted(record.snapshots, key=lambda s: -s["t"])
        for ax, snap in zip(_strip_axes(fig, len(snaps)), snaps):
            img = np.asarray(snap["image"], dtype=np.float32)
            ax.imshow(np.clip((img.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0))
            ax.set_title(f"t={snap['t']}", fontsize=7)

    fig.suptitle(f"{record.prompt!r} (seed {record.seed})", fontsize=10)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_runs(records: list[RunRecord], out_dir: str | Path) -> list[Path]:
    """One trajectory figure per record; an empty list writes nothing."""
    paths = []
    for i, record in enumerate(records):
        stem = f"trajectory_{i:03d}_seed{record.seed}"
        paths.append(plot_run_trajectory(record, Path(out_dir) / f"{stem}.png"))
    return paths


def plot_report_bars(report_dict: dict, out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Bar chart per metric across variants; skips metrics with no data."""
    stats = report_dict.get("variant_stats", {})
    if not stats:
        return []
    out = Path(out_dir)
    paths: list[Path] = []
    variants = sorted(stats)
    for metric in REPORT_METRICS:
        means, stds, labels = [], [], []
        for v in variants:
            cell = stats[v].get(metric)
            if cell and cell.get("mean") is not None:
                labels.append(v)
                means.append(cell["mean"])
                stds.append(cell.get("std") or 0.0)
        if not labels:
            continue
        out.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(labels)), 4))
        x = np.arange(len(labels))
        ax.bar(x, means, yerr=stds, capsize=3)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by variant (mean ± std)")
        fig.tight_layout()
        path = out / f"{stem}_{metric}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths
