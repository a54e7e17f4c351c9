"""Matplotlib figure writers for run reports.

Every helper takes plain numpy data, writes one PNG next to the run's
delimited output, and returns the path it wrote.  The Agg backend is
forced at import time so the CLI works on headless machines.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

DPI = 110


def _finish(fig, out_path):
    fig.tight_layout()
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def read_metrics_csv(path):
    """Load a metrics CSV written by the trainer into a dict of float arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"metrics file is empty: {path}")
    header = rows[0]
    cols = {name: [] for name in header}
    for row in rows[1:]:
        for name, cell in zip(header, row):
            cols[name].append(float(cell))
    return {name: np.asarray(vals) for name, vals in cols.items()}


def training_curves(metrics_paths, out_path):
    """Plot per-stage loss components over training steps.

    metrics_paths: list of (stage_name, csv_path) in protocol order.
    """
    fig, axes = plt.subplots(1, max(len(metrics_paths), 1), figsize=(5.0 * max(len(metrics_paths), 1), 3.6), squeeze=False)
    for ax, (stage, path) in zip(axes[0], metrics_paths):
        cols = read_metrics_csv(path)
        step = cols["step"]
        for key in ("total", "flow", "cot", "depth"):
            if key in cols and np.any(cols[key] != 0.0):
                ax.plot(step, cols[key], label=key, linewidth=1.0)
        ax.set_title(stage)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    return _finish(fig, out_path)


def depth_comparison(depth_true, depth_pred, out_path):
    """Side-by-side ground-truth and rendered depth plus signed error map."""
    depth_true = np.asarray(depth_true, dtype=np.float64)
    depth_pred = np.asarray(depth_pred, dtype=np.float64)
    err = depth_pred - depth_true
    vmin = float(min(depth_true.min(), depth_pred.min()))
    vmax = float(max(depth_true.max(), depth_pred.max()))
    lim = float(max(abs(err.min()), abs(err.max()), 1e-6))

    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.8))
    im0 = axes[0].imshow(depth_true, vmin=vmin, vmax=vmax, cmap="viridis")
    axes[0].set_title("depth (truth)")
    im1 = axes[1].imshow(depth_pred, vmin=vmin, vmax=vmax, cmap="viridis")
    axes[1].set_title("depth (rendered)")
    im2 = axes[2].imshow(err, vmin=-lim, vmax=lim, cmap="coolwarm")
    axes[2].set_title("signed error")
    for ax, im in zip(axes, (im0, im1, im2)):
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, out_path)


def rollout_trajectory(demo_pos, pred_pos, out_path):
    """Demo vs policy end-effector path, shown in the three axis planes.

    Both inputs are (T, 3) absolute positions in metres.
    """
    demo_pos = np.asarray(demo_pos, dtype=np.float64)
    pred_pos = np.asarray(pred_pos, dtype=np.float64)
    planes = (("x", "y", 0, 1), ("x", "z", 0, 2), ("y", "z", 1, 2))
    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.8))
    for ax, (na, nb, ia, ib) in zip(axes, planes):
        ax.plot(demo_pos[:, ia], demo_pos[:, ib], "o-", label="demo", markersize=3)
        ax.plot(pred_pos[:, ia], pred_pos[:, ib], "s--", label="policy", markersize=3)
        ax.scatter([demo_pos[0, ia]], [demo_pos[0, ib]], c="k", marker="*", zorder=5, label="start")
        ax.set_xlabel(f"{na} [m]")
        ax.set_ylabel(f"{nb} [m]")
        ax.axis("equal")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    return _finish(fig, out_path)


def ablation_bars(rows, out_path):
    """Composite metric per ablation cell, lower is better.

    rows: list of dicts with at least "cell" and "composite" keys.
    """
    cells = [r["cell"] for r in rows]
    values = np.asarray([r["composite"] for r in rows], dtype=np.float64)
    order = np.argsort(values)
    fig, ax = plt.subplots(figsize=(1.4 * len(cells) + 2.0, 3.8))
    colors = ["#2a7f4f" if cells[i] == "full" else "#4a6fa5" for i in order]
    ax.bar(range(len(cells)), values[order], color=colors)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels([cells[i] for i in order], rotation=20, ha="right")
    ax.set_ylabel("composite metric (lower is better)")
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, out_path)


def eval_report_figures(figure_data, out_dir, prefix="eval"):
    """Write the standard evaluation figure set from evaluate()'s figure_data."""
    paths = []
    if "depth_true" in figure_data and "depth_pred" in figure_data:
        paths.append(
            depth_comparison(
                figure_data["depth_true"],
                figure_data["depth_pred"],
                os.path.join(out_dir, f"{prefix}_depth.png"),
            )
        )
    if "rollout_demo" in figure_data and "rollout_pred" in figure_data:
        paths.append(
            rollout_trajectory(
                figure_data["rollout_demo"],
                figure_data["rollout_pred"],
                os.path.join(out_dir, f"{prefix}_rollout.png"),
            )
        )
    return paths
