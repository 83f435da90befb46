"""Analytical cost model (MACs, softmax elements, peak memory) and the
hyperparameter sweep with Pareto-front and knee-point selection.

The per-frame counts assume a fully warmed-up graph with no runtime
pruning (the worst case): the live edge count equals the closed form, every
live patch carries one depth unknown, and the bundle-adjustment window is
full. Under exactly those conditions the pipeline's runtime instrumentation
reproduces these numbers integer-for-integer.
"""

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import costs
from .correlation import corr_macs_per_edge
from .errors import ValidationError
from .graph import n_edges
from .patchifier import pad16
from .update import update_macs_per_edge
from .weights import enumerate_tensor_shapes


@dataclass
class CostReport:
    macs: dict                 # per-block MACs {patchifier, correlation, update, ba}
    e_sigma: int
    memory: dict               # per-component bytes
    n_edges: int

    @property
    def macs_total(self):
        return sum(self.macs.values())

    @property
    def memory_total(self):
        return sum(self.memory.values())

    def to_dict(self):
        return {
            "n_edges": self.n_edges,
            "e_sigma": self.e_sigma,
            "macs": dict(self.macs),
            "macs_total": self.macs_total,
            "memory_bytes": dict(self.memory),
            "memory_total_bytes": self.memory_total,
        }


def e_sigma_count(config):
    """Softmax elements per forward pass: 2 * edges * hidden width, or 0."""
    if not config.use_softmax_agg:
        return 0
    edges = n_edges(config.patches_per_frame, config.removal_window,
                    config.patch_lifetime)
    return 2 * edges * config.cf_channels


def _warmed_dims(config):
    edges = n_edges(config.patches_per_frame, config.removal_window,
                    config.patch_lifetime)
    live_patches = config.patches_per_frame * (config.removal_window + 1)
    pose_vars = config.opt_window - 1
    return edges, live_patches, pose_vars


def macs_per_frame(config):
    """Per-block multiply-accumulate counts for one warmed-up frame."""
    edges, live_patches, pose_vars = _warmed_dims(config)
    per_iter = {
        "correlation": edges * corr_macs_per_edge(config),
        "update": edges * update_macs_per_edge(config),
        "ba": costs.ba_solve_macs(edges, pose_vars, live_patches,
                                  config.ba_iterations),
    }
    return {
        "patchifier": costs.patchifier_macs(config),
        **{k: v * config.update_iterations for k, v in per_iter.items()},
    }


def weight_bytes(config):
    total = 0
    for shape in enumerate_tensor_shapes(config).values():
        total += 4 * int(np.prod(shape))
    return total


def peak_memory(config):
    """Payload-byte breakdown at the within-frame peak.

    Matching-feature maps (and the pyramid level) are retained for
    ``removal_window + patch_lifetime + 1`` frames at the peak; context
    features and the density map exist for the current frame only.
    """
    h4, w4 = pad16(config.height) // 4, pad16(config.width) // 4
    h16, w16 = pad16(config.height) // 16, pad16(config.width) // 16
    retained = config.removal_window + config.patch_lifetime + 1
    edges, live_patches, pose_vars = _warmed_dims(config)

    mem = {
        "mf_maps": retained * h4 * w4 * config.mf_channels * 4,
        "pyr_maps": (retained * h16 * w16 * config.mf_channels * 4
                     if config.use_pyramid else 0),
        "cf_current": h4 * w4 * config.cf_channels * 4,
        "density_current": h4 * w4 * 8,
        "patches": live_patches * (9 * config.mf_channels * 4
                                   + config.cf_channels * 4
                                   + costs.PATCH_MISC_BYTES),
        "edges": edges * (config.cf_channels * 4 + config.corr_length * 4
                          + costs.EDGE_MISC_BYTES),
        "weights": weight_bytes(config),
        "ba_workspace": ba_workspace_bytes(edges, pose_vars, live_patches),
    }
    return mem


def ba_workspace_bytes(n_terms, n_pose_vars, n_depth_vars):
    """Float64 solver workspace: per-term blocks plus the reduced system."""
    p6 = 6 * n_pose_vars
    per_term = 2 + 12 + 12 + 2          # residual, two pose blocks, depth block
    return 8 * (n_terms * per_term + p6 * p6 + p6 * n_depth_vars
                + 2 * p6 + 2 * n_depth_vars)


def cost_report(config):
    edges, _, _ = _warmed_dims(config)
    return CostReport(
        macs=macs_per_frame(config),
        e_sigma=e_sigma_count(config),
        memory=peak_memory(config),
        n_edges=edges,
    )


# -- Pareto front and knee selection --------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    """One swept configuration: minimize both x (cost) and y (error)."""

    x: float
    y: float
    label: tuple = ()

    def dominates(self, other):
        return (self.x <= other.x and self.y <= other.y
                and (self.x < other.x or self.y < other.y))


def pareto_front(points):
    """Non-dominated subset (both coordinates minimized), sorted by x."""
    if not points:
        raise ValidationError("empty point set")
    kept = [p for p in points
            if not any(q.dominates(p) for q in points)]
    return sorted(kept, key=lambda p: (p.x, p.y))


@dataclass
class KneeResult:
    index: int
    distance: float
    degenerate: bool


def knee_point(front):
    """Point of maximum perpendicular distance to the first-to-last chord.

    ``front`` must be sorted by x with at least three points and distinct
    endpoints. A collinear front is flagged degenerate with distance zero.
    Ties resolve to the lower-x point.
    """
    if len(front) < 3:
        raise ValidationError(f"knee selection needs >= 3 points, got {len(front)}")
    first, last = front[0], front[-1]
    dx, dy = last.x - first.x, last.y - first.y
    norm = math.hypot(dx, dy)
    if norm == 0:
        raise ValidationError("first and last Pareto points coincide")
    best_idx, best_dist = 0, -1.0
    for i, p in enumerate(front):
        dist = abs(dy * (p.x - first.x) - dx * (p.y - first.y)) / norm
        if dist > best_dist + 1e-15:
            best_idx, best_dist = i, dist
    return KneeResult(index=best_idx, distance=best_dist,
                      degenerate=best_dist <= 1e-12)


# -- sweep ----------------------------------------------------------------

PAPER_GRID = {
    "patches_per_frame": list(range(16, 97, 8)),
    "removal_window": [8, 10, 12, 14, 16, 22],
    "patch_lifetime": list(range(8, 14)),
}

SWEEP_COLUMNS = ["patches_per_frame", "removal_window", "patch_lifetime",
                 "status", "n_edges", "macs_total", "e_sigma",
                 "memory_total_bytes", "metric"]


def grid_cells(grid):
    """Deterministic enumeration of every (patches, window, lifetime) cell."""
    cells = []
    for n in grid["patches_per_frame"]:
        for r in grid["removal_window"]:
            for p in grid["patch_lifetime"]:
                cells.append((int(n), int(r), int(p)))
    return cells


def cost_model_evaluator(base_config):
    """Cost-model-only evaluator: the error proxy decays with edge count.

    Without trained weights the sweep cannot measure a real trajectory
    error; ``1 / n_edges`` stands in as a monotone proxy for the observed
    error-versus-edges trend so front/knee machinery stays exercised.
    """

    def evaluate(config):
        report = cost_report(config)
        edges = max(report.n_edges, 1)
        return report, 1.0 / edges

    return evaluate


def run_sweep(grid, evaluator, base_config, progress_path=None, resume=False):
    """Evaluate every grid cell; optionally resumable through a progress CSV.

    ``evaluator(config) -> (CostReport, metric)``; a failing cell is
    recorded with status ``failed`` and the sweep continues. With ``resume``
    cells already present in the progress file are not re-evaluated.
    Returns the full row list (dicts, one per cell).
    """
    cells = grid_cells(grid)
    if not cells:
        raise ValidationError("empty sweep grid")
    done = {}
    if resume and progress_path and os.path.exists(progress_path):
        for row in _read_progress(progress_path):
            key = (row["patches_per_frame"], row["removal_window"],
                   row["patch_lifetime"])
            done[key] = row

    writer = None
    fp = None
    if progress_path:
        exists = os.path.exists(progress_path) and resume
        fp = open(progress_path, "a" if exists else "w", newline="")
        writer = csv.DictWriter(fp, fieldnames=SWEEP_COLUMNS)
        if not exists:
            writer.writeheader()
            fp.flush()

    rows = []
    try:
        for n, r, p in cells:
            key = (n, r, p)
            if key in done:
                rows.append(done[key])
                continue
            config = base_config.replace(patches_per_frame=n,
                                         removal_window=r,
                                         patch_lifetime=p)
            row = {"patches_per_frame": n, "removal_window": r,
                   "patch_lifetime": p}
            try:
                report, metric = evaluator(config)
                row.update(status="ok", n_edges=report.n_edges,
                           macs_total=report.macs_total,
                           e_sigma=report.e_sigma,
                           memory_total_bytes=report.memory_total,
                           metric=metric)
            except Exception as exc:  # evaluator failure: mark and continue
                row.update(status="failed", n_edges="", macs_total="",
                           e_sigma="", memory_total_bytes="", metric="")
                row["status"] = f"failed:{type(exc).__name__}"
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fp.flush()
    finally:
        if fp is not None:
            fp.close()
    return rows


def _read_progress(path):
    rows = []
    with open(path, newline="") as fp:
        for raw in csv.DictReader(fp):
            row = dict(raw)
            for key in ("patches_per_frame", "removal_window", "patch_lifetime"):
                row[key] = int(row[key])
            for key in ("n_edges", "macs_total", "e_sigma", "memory_total_bytes"):
                row[key] = int(row[key]) if row[key] else ""
            row["metric"] = float(row["metric"]) if row["metric"] else ""
            rows.append(row)
    return rows


def sweep_pareto(rows, x_key="macs_total", y_key="metric"):
    """Pareto points of the successful sweep rows."""
    points = []
    for row in rows:
        if not str(row["status"]).startswith("ok"):
            continue
        points.append(ParetoPoint(
            x=float(row[x_key]), y=float(row[y_key]),
            label=(row["patches_per_frame"], row["removal_window"],
                   row["patch_lifetime"])))
    return pareto_front(points)
