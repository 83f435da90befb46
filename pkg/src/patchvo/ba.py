"""Sliding-window bundle adjustment over camera poses and inverse patch
depths.

The cost is a confidence-weighted Huber sum of reprojection residuals
(current reprojection minus the flow target, in feature pixels). Poses are
optimized on the se(3) tangent with a left retraction; inverse depths are
plain positive scalars. One pose per window is held fixed as gauge, frames
outside the window are fixed implicitly.

The damped normal equations are solved through a Schur complement on the
inverse depths (whose block is diagonal); a dense solve over the full
system is available for cross-checking. Each Levenberg-Marquardt iteration
performs exactly one solve: a rejected step only raises the damping for the
next iteration, which keeps the per-iteration work deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFault, SolverError
from .geometry import SE3, skew
from . import costs

DEGENERATE_Z = 1e-8
MIN_INV_DEPTH = 1e-8
LAMBDA_MAX = 1e10


@dataclass
class BAProblem:
    """One residual term per live edge against the active window."""

    poses: dict                 # frame_id -> SE3 (world to camera), all referenced
    inv_depths: np.ndarray      # (K,) one per patch with at least one term
    intrinsics: object          # CameraIntrinsics on the feature grid
    active_frames: list         # frame ids whose poses are optimized
    # per-term arrays, length E
    frame_i: np.ndarray         # patch's birth frame id
    frame_j: np.ndarray         # target frame id
    center: np.ndarray          # (E, 2) patch centers in frame i
    depth_index: np.ndarray     # (E,) index into inv_depths
    target: np.ndarray          # (E, 2) flow target in frame j
    weight: np.ndarray          # (E,) confidence weights in [0, 1]
    huber_delta: float = 1.0

    def __post_init__(self):
        if len(self.frame_i) == 0:
            raise SolverError("bundle adjustment needs at least one residual term")
        if not self.active_frames:
            raise SolverError("no active frames (did the gauge fixing remove all?)")

    @property
    def num_terms(self):
        return len(self.frame_i)


def reprojection_residual(center, inv_depth, pose_i, pose_j, intrinsics, target):
    """Residual of one term: reprojected patch center minus target.

    Degenerate geometry (point at or behind the target camera) returns a
    zero residual and ``degenerate=True`` so the term can be deactivated.
    """
    intr = intrinsics
    rel = pose_j.compose(pose_i.inverse())
    n = np.array([(center[0] - intr.cx) / intr.fx,
                  (center[1] - intr.cy) / intr.fy, 1.0])
    x_j = rel.apply(n / inv_depth)
    if x_j[2] <= DEGENERATE_Z:
        return np.zeros(2), True
    proj = np.array([intr.fx * x_j[0] / x_j[2] + intr.cx,
                     intr.fy * x_j[1] / x_j[2] + intr.cy])
    return proj - np.asarray(target, dtype=np.float64), False


def jacobians(center, inv_depth, pose_i, pose_j, intrinsics):
    """Analytic partials of the residual for one term.

    Returns ``(J_i, J_j, J_d, degenerate)`` where the pose blocks are (2, 6)
    with respect to left-retraction tangents [v, w] of the world-to-camera
    poses, and ``J_d`` is (2,) with respect to the inverse depth.
    """
    intr = intrinsics
    rel = pose_j.compose(pose_i.inverse())
    R = rel.matrix()
    n = np.array([(center[0] - intr.cx) / intr.fx,
                  (center[1] - intr.cy) / intr.fy, 1.0])
    x_i = n / inv_depth
    x_j = R @ x_i + rel.t
    if x_j[2] <= DEGENERATE_Z:
        return np.zeros((2, 6)), np.zeros((2, 6)), np.zeros(2), True
    z = x_j[2]
    j_proj = np.array([
        [intr.fx / z, 0.0, -intr.fx * x_j[0] / z**2],
        [0.0, intr.fy / z, -intr.fy * x_j[1] / z**2],
    ])
    j_pose_j = np.concatenate([j_proj, j_proj @ (-skew(x_j))], axis=1)
    j_pose_i = np.concatenate([j_proj @ (-R), j_proj @ (R @ skew(x_i))], axis=1)
    j_depth = j_proj @ (R @ n) * (-1.0 / inv_depth**2)
    return j_pose_i, j_pose_j, j_depth, False


def _huber_rho(norms, delta):
    quad = norms <= delta
    out = np.where(quad, 0.5 * norms**2, delta * (norms - 0.5 * delta))
    return out


def _irls_weights(norms, delta):
    return np.minimum(1.0, delta / np.maximum(norms, 1e-12))


def _batch_terms(problem, poses, depths):
    """Residuals and Jacobian blocks for every term, vectorized by frame pair."""
    e = problem.num_terms
    intr = problem.intrinsics
    r = np.zeros((e, 2))
    ji = np.zeros((e, 2, 6))
    jj = np.zeros((e, 2, 6))
    jd = np.zeros((e, 2))
    valid = np.ones(e, dtype=bool)

    n = np.stack([
        (problem.center[:, 0] - intr.cx) / intr.fx,
        (problem.center[:, 1] - intr.cy) / intr.fy,
        np.ones(e),
    ], axis=1)
    d = depths[problem.depth_index]
    x_i = n / d[:, None]

    pair_key = problem.frame_i.astype(np.int64) << 32 | problem.frame_j.astype(np.int64)
    order = np.argsort(pair_key, kind="stable")
    sorted_key = pair_key[order]
    starts = np.flatnonzero(np.concatenate([[True], sorted_key[1:] != sorted_key[:-1]]))
    bounds = np.append(starts, e)
    for s, t in zip(bounds[:-1], bounds[1:]):
        rows = order[s:t]
        fi = int(problem.frame_i[rows[0]])
        fj = int(problem.frame_j[rows[0]])
        rel = poses[fj].compose(poses[fi].inverse())
        R = rel.matrix()
        x_j = x_i[rows] @ R.T + rel.t
        bad = x_j[:, 2] <= DEGENERATE_Z
        valid[rows[bad]] = False
        ok = rows[~bad]
        if len(ok) == 0:
            continue
        xg = x_j[~bad]
        z = xg[:, 2]
        proj = np.stack([intr.fx * xg[:, 0] / z + intr.cx,
                         intr.fy * xg[:, 1] / z + intr.cy], axis=1)
        r[ok] = proj - problem.target[ok]

        jp = np.zeros((len(ok), 2, 3))
        jp[:, 0, 0] = intr.fx / z
        jp[:, 0, 2] = -intr.fx * xg[:, 0] / z**2
        jp[:, 1, 1] = intr.fy / z
        jp[:, 1, 2] = -intr.fy * xg[:, 1] / z**2

        # d(x_j)/d(xi_j) = [I | -skew(x_j)], d(x_j)/d(xi_i) = [-R | R skew(x_i)]
        sk_j = np.zeros((len(ok), 3, 3))
        sk_j[:, 0, 1] = -xg[:, 2]; sk_j[:, 0, 2] = xg[:, 1]
        sk_j[:, 1, 0] = xg[:, 2];  sk_j[:, 1, 2] = -xg[:, 0]
        sk_j[:, 2, 0] = -xg[:, 1]; sk_j[:, 2, 1] = xg[:, 0]
        jj[ok, :, :3] = jp
        jj[ok, :, 3:] = -np.einsum("eab,ebc->eac", jp, sk_j)

        xi_ok = x_i[ok]
        sk_i = np.zeros((len(ok), 3, 3))
        sk_i[:, 0, 1] = -xi_ok[:, 2]; sk_i[:, 0, 2] = xi_ok[:, 1]
        sk_i[:, 1, 0] = xi_ok[:, 2];  sk_i[:, 1, 2] = -xi_ok[:, 0]
        sk_i[:, 2, 0] = -xi_ok[:, 1]; sk_i[:, 2, 1] = xi_ok[:, 0]
        jpR = jp @ R
        ji[ok, :, :3] = -jpR
        ji[ok, :, 3:] = np.einsum("eab,ebc->eac", jpR, sk_i)

        jd[ok] = np.einsum("eab,eb->ea", jp, n[ok] @ R.T) * (-1.0 / d[ok, None]**2)
    return r, ji, jj, jd, valid


def _robust_cost(problem, poses, depths):
    r, _, _, _, valid = _batch_terms(problem, poses, depths)
    norms = np.linalg.norm(r, axis=1)
    cost = float(np.sum(problem.weight[valid] * _huber_rho(norms[valid], problem.huber_delta)))
    if not np.isfinite(cost):
        raise NumericFault("non-finite bundle-adjustment cost")
    return cost


def solve_damped(B, E6, C, v, w, lam, use_schur=True):
    """Solve the damped normal equations; returns (pose step, depth step).

    ``B`` is (6P, 6P), ``E6`` (6P, K), ``C`` the (K,) diagonal depth block,
    ``v``/``w`` the gradient halves. Both code paths (Schur elimination and
    the dense full-system solve) apply identical damping.
    """
    p6 = B.shape[0]
    bd = B + lam * np.diag(np.diag(B)) + 1e-12 * np.eye(p6)
    cd = C * (1.0 + lam) + 1e-12
    try:
        if use_schur:
            if p6 == 0:
                return np.zeros(0), w / cd
            ec = E6 / cd[None, :]
            S = bd - ec @ E6.T
            rhs = v - ec @ w
            dp = np.linalg.solve(S, rhs)
            dd = (w - E6.T @ dp) / cd
            return dp, dd
        k = C.shape[0]
        H = np.zeros((p6 + k, p6 + k))
        H[:p6, :p6] = bd
        H[:p6, p6:] = E6
        H[p6:, :p6] = E6.T
        H[p6:, p6:] = np.diag(cd)
        g = np.concatenate([v, w])
        step = np.linalg.solve(H, g)
        return step[:p6], step[p6:]
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            f"normal equations singular after damping (lambda={lam:.3g}, "
            f"{p6} pose + {C.shape[0]} depth unknowns)"
        ) from exc


def ba_solve(problem, iterations=2, damping=1e-4, counter=None, use_schur=True):
    """Levenberg-Marquardt over the window; returns (poses, inv_depths, cost).

    The returned cost is the final robust cost; accepted steps never
    increase it. Inverse depths are clamped positive after every step.
    """
    poses = {fid: pose.copy() for fid, pose in problem.poses.items()}
    depths = problem.inv_depths.astype(np.float64).copy()
    slot = {fid: i for i, fid in enumerate(problem.active_frames)}
    n_pose = len(slot)
    k = depths.shape[0]
    e = problem.num_terms
    lam = damping

    if counter is not None:
        counter.add(e * costs.BA_RESIDUAL_MACS)
    cost = _robust_cost(problem, poses, depths)

    si = np.array([slot.get(int(f), -1) for f in problem.frame_i])
    sj = np.array([slot.get(int(f), -1) for f in problem.frame_j])

    for _ in range(iterations):
        r, ji, jj, jd, valid = _batch_terms(problem, poses, depths)
        norms = np.linalg.norm(r, axis=1)
        omega = problem.weight * _irls_weights(norms, problem.huber_delta)
        omega = np.where(valid, omega, 0.0)

        p6 = 6 * n_pose
        B = np.zeros((n_pose, 6, n_pose, 6))
        E6 = np.zeros((n_pose, 6, k))
        C = np.zeros(k)
        v = np.zeros((n_pose, 6))
        w = np.zeros(k)

        for jblock, s in ((ji, si), (jj, sj)):
            act = s >= 0
            if not np.any(act):
                continue
            jw = jblock[act] * omega[act, None, None]
            np.add.at(v, s[act], -np.einsum("eab,ea->eb", jw, r[act]))
            np.add.at(E6, (s[act], slice(None), problem.depth_index[act]),
                      np.einsum("eab,ea->eb", jw, jd[act]))

        for jb1, s1 in ((ji, si), (jj, sj)):
            for jb2, s2 in ((ji, si), (jj, sj)):
                act = (s1 >= 0) & (s2 >= 0)
                if not np.any(act):
                    continue
                blocks = np.einsum("eab,e,eac->ebc", jb1[act], omega[act], jb2[act])
                np.add.at(B, (s1[act], slice(None), s2[act]), blocks)

        np.add.at(C, problem.depth_index, omega * np.einsum("ea,ea->e", jd, jd))
        np.add.at(w, problem.depth_index, -omega * np.einsum("ea,ea->e", jd, r))

        if counter is not None:
            counter.add(costs.ba_iteration_macs(e, n_pose, k))

        dp, dd = solve_damped(B.reshape(p6, p6), E6.reshape(p6, k), C,
                              v.reshape(p6), w, lam, use_schur=use_schur)

        candidate_poses = {fid: pose.copy() for fid, pose in poses.items()}
        for fid, s in slot.items():
            candidate_poses[fid] = poses[fid].retract(dp[6 * s:6 * s + 6])
        candidate_depths = np.maximum(depths + dd, MIN_INV_DEPTH)

        new_cost = _robust_cost(problem, candidate_poses, candidate_depths)
        if new_cost <= cost:
            poses, depths, cost = candidate_poses, candidate_depths, new_cost
            lam = max(lam / 3.0, 1e-10)
        else:
            lam = lam * 10.0
            if lam > LAMBDA_MAX:
                raise SolverError(
                    f"damping exceeded {LAMBDA_MAX:.0e} without an acceptable step"
                )
    return poses, depths, cost
