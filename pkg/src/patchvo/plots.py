"""Matplotlib figure rendering for the CLI report paths.

All figures are written straight to files (Agg backend); nothing is shown
interactively.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_sweep_scatter(rows, front, knee, path, x_key="macs_total",
                       y_key="metric"):
    """Sweep cells in gray, the Pareto front as a line, the knee circled."""
    fig, ax = plt.subplots(figsize=(8, 5))
    xs = [float(r[x_key]) for r in rows if str(r["status"]).startswith("ok")]
    ys = [float(r[y_key]) for r in rows if str(r["status"]).startswith("ok")]
    ax.scatter(xs, ys, s=14, c="lightgray", edgecolors="gray", linewidths=0.4,
               label="swept configurations", zorder=1)
    fx = [p.x for p in front]
    fy = [p.y for p in front]
    ax.plot(fx, fy, "r--", linewidth=1.2, zorder=2)
    ax.scatter(fx, fy, s=36, c="red", marker="D", label="Pareto front", zorder=3)
    if knee is not None:
        kp = front[knee.index]
        ax.scatter([kp.x], [kp.y], s=140, facecolors="none", edgecolors="blue",
                   linewidths=1.8, label=f"knee {kp.label}", zorder=4)
    ax.set_xlabel("MACs per frame")
    ax.set_ylabel("error metric")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, linestyle=":")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_trajectory_overlay(est, gt, path, aligned=None):
    """Top-down (x, y) overlay of estimate vs ground truth."""
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(gt.positions[:, 0], gt.positions[:, 1], "k-", linewidth=1.2,
            label="ground truth")
    ax.plot(est.positions[:, 0], est.positions[:, 1], "c:", linewidth=1.0,
            label="estimate (raw)")
    if aligned is not None:
        pts = aligned.apply(est.positions)
        ax.plot(pts[:, 0], pts[:, 1], "r--", linewidth=1.2,
                label="estimate (aligned)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.axis("equal")
    ax.grid(alpha=0.3, linestyle=":")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
