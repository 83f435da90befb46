"""Trajectory metrics: similarity alignment, ATE, normalized ATE,
stationary-segment trimming, and the median-of-runs protocol.

Estimated and ground-truth poses are associated by nearest timestamp
within a tolerance (default 10 ms), each ground-truth pose used at most
once. ATE is the RMSE of position residuals after applying the alignment
to the estimate; it carries no rotational component.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AssociationError, ValidationError
from .geometry import Sim3, matrix_to_quat
from .trajectory import Trajectory

ASSOCIATION_TOLERANCE_S = 0.010


def associate(est, gt, tolerance=ASSOCIATION_TOLERANCE_S):
    """Greedy nearest-timestamp matching; returns (est indices, gt indices).

    Candidate pairs within the tolerance are taken best-first; each pose on
    either side is used at most once.
    """
    gt_times = gt.timestamps
    pairs = []
    for i, t in enumerate(est.timestamps):
        pos = int(np.searchsorted(gt_times, t))
        for j in range(max(0, pos - 4), min(len(gt_times), pos + 4)):
            diff = abs(gt_times[j] - t)
            if diff < tolerance:
                pairs.append((diff, i, j))
    pairs.sort()
    used_est, used_gt = set(), set()
    matches = []
    for _, i, j in pairs:
        if i not in used_est and j not in used_gt:
            used_est.add(i)
            used_gt.add(j)
            matches.append((i, j))
    if not matches:
        raise AssociationError(
            f"no pose pairs within {tolerance * 1e3:.1f} ms "
            f"({len(est)} estimated vs {len(gt)} ground-truth poses)"
        )
    matches.sort()
    ei = np.array([m[0] for m in matches])
    gi = np.array([m[1] for m in matches])
    return ei, gi


def umeyama_align(est, gt, with_scale=True, tolerance=ASSOCIATION_TOLERANCE_S):
    """Least-squares similarity aligning ``est`` onto ``gt``.

    Returns the :class:`~patchvo.geometry.Sim3` minimizing
    ``sum || gt_i - (s R est_i + t) ||^2`` (``s = 1`` when ``with_scale`` is
    false). Needs at least three non-collinear associated position pairs.
    """
    ei, gi = associate(est, gt, tolerance)
    x = est.positions[ei]
    y = gt.positions[gi]
    if len(x) < 3:
        raise ValidationError(f"alignment needs >= 3 associated pairs, got {len(x)}")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / len(x)
    if np.linalg.matrix_rank(cov, tol=1e-12) < 2:
        raise ValidationError("degenerate (collinear or coincident) point sets")
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = (xc ** 2).sum() / len(x)
        s = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        s = 1.0
    t = mu_y - s * R @ mu_x
    return Sim3(s, matrix_to_quat(R), t)


def ate(est, gt, alignment=None, tolerance=ASSOCIATION_TOLERANCE_S):
    """Position RMSE (meters) after applying ``alignment`` to the estimate."""
    ei, gi = associate(est, gt, tolerance)
    x = est.positions[ei]
    if alignment is not None:
        x = alignment.apply(x)
    residuals = gt.positions[gi] - x
    return float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))


def nate(per_dataset):
    """Mean over datasets of mean over sequences of ATE / length.

    ``per_dataset`` maps a dataset name to a list of ``(ate_m, length_m)``
    pairs, one per sequence.
    """
    if not per_dataset:
        raise ValidationError("no datasets given")
    dataset_means = []
    for name, pairs in per_dataset.items():
        if not pairs:
            raise ValidationError(f"dataset {name!r} has no sequences")
        ratios = []
        for ate_s, length_s in pairs:
            if length_s <= 0:
                raise ValidationError(
                    f"dataset {name!r}: sequence length must be positive, got {length_s}")
            ratios.append(ate_s / length_s)
        dataset_means.append(float(np.mean(ratios)))
    return float(np.mean(dataset_means))


def trim_trajectory(traj, head_m=0.0, tail_m=0.0):
    """Drop stationary lead-in/out by cumulative path length.

    The first pose whose cumulative arc length reaches ``head_m`` is
    retained (>= rule); the tail is trimmed symmetrically from the end.
    """
    if len(traj) < 2:
        raise ValidationError("trimming needs at least 2 poses")
    if head_m < 0 or tail_m < 0:
        raise ValidationError("trim lengths must be non-negative")
    seg = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if head_m + tail_m >= total:
        raise ValidationError(
            f"trims ({head_m} + {tail_m} m) exceed path length {total:.3f} m")
    keep = (cum >= head_m) & (total - cum >= tail_m)
    return traj.slice(keep)


def median_of_runs(ates):
    """Exact median; even counts average the two middle values."""
    if len(ates) == 0:
        raise ValidationError("median of zero runs")
    values = sorted(float(a) for a in ates)
    n = len(values)
    if n % 2:
        return values[n // 2]
    return 0.5 * (values[n // 2 - 1] + values[n // 2])


@dataclass
class EvalReport:
    """Per-sequence errors plus the aggregate protocol numbers."""

    sequences: list = field(default_factory=list)  # dicts: dataset, name, ate_m, length_m
    run_ates: list = field(default_factory=list)   # raw per-run ATEs (median mode)
    alignment: dict = field(default_factory=dict)

    def add_sequence(self, dataset, name, ate_m, length_m):
        self.sequences.append({"dataset": dataset, "sequence": name,
                               "ate_m": float(ate_m), "length_m": float(length_m)})

    def dataset_means(self):
        grouped = {}
        for row in self.sequences:
            grouped.setdefault(row["dataset"], []).append(row["ate_m"])
        return {d: float(np.mean(v)) for d, v in grouped.items()}

    def nate(self):
        grouped = {}
        for row in self.sequences:
            grouped.setdefault(row["dataset"], []).append(
                (row["ate_m"], row["length_m"]))
        return nate(grouped)

    def to_dict(self):
        out = {
            "sequences": self.sequences,
            "dataset_mean_ate_m": self.dataset_means(),
            "nate": self.nate() if self.sequences else None,
            "alignment": self.alignment,
        }
        if self.run_ates:
            out["run_ates_m"] = [float(a) for a in self.run_ates]
            out["median_ate_m"] = median_of_runs(self.run_ates)
        return out

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fp:
                fp.write(text + "\n")
        return text

    def table(self):
        lines = [f"{'dataset':<12} {'sequence':<24} {'ATE [m]':>10} {'length [m]':>11}"]
        for row in self.sequences:
            lines.append(f"{row['dataset']:<12} {row['sequence']:<24} "
                         f"{row['ate_m']:>10.4f} {row['length_m']:>11.3f}")
        for dataset, mean in self.dataset_means().items():
            lines.append(f"{dataset:<12} {'<mean>':<24} {mean:>10.4f}")
        if self.sequences:
            lines.append(f"{'overall':<12} {'<nATE>':<24} {self.nate():>10.6f}")
        if self.run_ates:
            lines.append(f"median ATE over {len(self.run_ates)} runs: "
                         f"{median_of_runs(self.run_ates):.4f} m")
        return "\n".join(lines)
