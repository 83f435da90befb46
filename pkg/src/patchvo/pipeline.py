"""Per-frame orchestration: voxel grids in, trajectory out.

Each frame: extract features, sample patches, grow the patch graph, expire
stale nodes, correlate every live edge, run the recurrent update, bundle-
adjust the trailing window, then prune motion-less edges. Expiry runs right
after insertion so the update always sees the steady-state edge set; the
within-frame peak (between insertion and expiry) is what the memory
instrumentation records.

Flow targets are stored per edge: they start at the reprojection of the
patch at creation time and accumulate the update operator's deltas; bundle
adjustment pulls reprojections toward them.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .ba import BAProblem, ba_solve
from .config import CameraIntrinsics
from .correlation import correlate_batch, reproject_many
from .costs import MacCounter
from .errors import ValidationError
from .events import Event, EventVoxelGrid, slice_fixed_duration
from .geometry import SE3, quat_conjugate
from .graph import PatchGraph
from .patchifier import FeatureSet, extract_features, sample_patches
from .trajectory import Trajectory
from .update import UpdateBatch, update_forward

BLOCKS = ("patchifier", "correlation", "update", "ba")


@dataclass
class FrameStats:
    frame_id: int
    edges_live: int
    e_sigma: int
    macs: dict                    # per-block MACs for this frame
    mem_bytes: int                # payload bytes at the within-frame peak
    times: dict

    @property
    def macs_total(self):
        return sum(self.macs.values())


@dataclass
class RunStats:
    frames: list = field(default_factory=list)

    def add(self, fs):
        self.frames.append(fs)

    @property
    def peak_memory_bytes(self):
        return max((f.mem_bytes for f in self.frames), default=0)

    def totals(self):
        totals = {b: 0 for b in BLOCKS}
        for f in self.frames:
            for b in BLOCKS:
                totals[b] += f.macs.get(b, 0)
        return {
            "frames": len(self.frames),
            "macs": totals,
            "macs_total": sum(totals.values()),
            "e_sigma_total": sum(f.e_sigma for f in self.frames),
            "peak_memory_bytes": self.peak_memory_bytes,
        }

    def to_dict(self):
        out = self.totals()
        out["per_frame"] = [
            {"frame_id": f.frame_id, "edges_live": f.edges_live,
             "e_sigma": f.e_sigma, "macs": f.macs, "macs_total": f.macs_total,
             "mem_bytes": f.mem_bytes, "times": f.times}
            for f in self.frames
        ]
        return out


class VOPipeline:
    """Owns the mutable state of one tracking run (single writer)."""

    def __init__(self, config, weights, intrinsics=None, seed=0):
        self.config = config
        self.weights = weights
        if intrinsics is None:
            intrinsics = CameraIntrinsics.default_for(config.width, config.height)
        self.intrinsics = intrinsics
        self.feat_intrinsics = intrinsics.scaled(0.25)
        self.seed = int(seed)
        self.graph = PatchGraph(config)
        self.poses = {}              # frame_id -> SE3, world to camera
        self.timestamps = {}
        self.ba_has_run = False
        self.stats = RunStats()

    # -- helpers ----------------------------------------------------------

    def _init_pose(self, frame_id):
        if frame_id == 0 or frame_id - 1 not in self.poses:
            pose = SE3.identity()
        elif frame_id - 2 not in self.poses:
            pose = self.poses[frame_id - 1].copy()
        else:
            # constant velocity: delta of the last two poses, applied again
            prev, prev2 = self.poses[frame_id - 1], self.poses[frame_id - 2]
            pose = prev.compose(prev2.inverse()).compose(prev)
        self.poses[frame_id] = pose

    def _edge_arrays(self, edge_ids):
        g = self.graph
        centers = np.array([g.patches[g.edges[e].patch_id].center for e in edge_ids])
        depths = np.array([g.patches[g.edges[e].patch_id].inv_depth for e in edge_ids])
        frame_i = np.array([g.patches[g.edges[e].patch_id].frame_id for e in edge_ids])
        frame_j = np.array([g.edges[e].target_frame_id for e in edge_ids])
        return centers, depths, frame_i, frame_j

    def _reproject_edges(self, edge_ids):
        centers, depths, fi, fj, = self._edge_arrays(edge_ids)
        return reproject_many(centers, depths, fi, fj, self.poses, self.feat_intrinsics)

    def _init_new_targets(self):
        fresh = [e for e in self.graph.live_edge_ids()
                 if not np.all(np.isfinite(self.graph.edges[e].target))]
        if not fresh:
            return
        uv, degenerate = self._reproject_edges(fresh)
        for row, eid in enumerate(fresh):
            edge = self.graph.edges[eid]
            if degenerate[row]:
                edge.target = self.graph.patches[edge.patch_id].center.copy()
            else:
                edge.target = uv[row]

    def _run_update(self, edge_ids, counters, esig):
        g = self.graph
        edges = [g.edges[e] for e in edge_ids]
        hidden = np.stack([e.hidden for e in edges])
        context = np.stack([g.patches[e.patch_id].context for e in edges])
        patch_idx = np.array([e.patch_id for e in edges])
        target_frame = np.array([e.target_frame_id for e in edges])
        centers = np.stack([e.target for e in edges])

        t0 = time.perf_counter()
        corr = np.empty((len(edges), self.config.corr_length), dtype=np.float32)
        for fid in np.unique(target_frame):
            rows = np.flatnonzero(target_frame == fid)
            feats = np.stack([g.patches[edges[r].patch_id].feature for r in rows])
            corr[rows] = correlate_batch(feats, g.frames[fid].features,
                                         centers[rows], self.config,
                                         counters["correlation"])
        t1 = time.perf_counter()

        batch = UpdateBatch(hidden=hidden, correlation=corr, context=context,
                            patch_index=patch_idx, target_frame=target_frame)
        out = update_forward(batch, self.weights, self.config,
                             counters["update"], esig)
        for row, edge in enumerate(edges):
            edge.hidden = out.hidden[row]
            edge.last_flow = out.flow_delta[row].astype(np.float64)
            edge.target = edge.target + edge.last_flow
            edge.confidence = float(out.confidence[row])
        t2 = time.perf_counter()
        return t1 - t0, t2 - t1

    def _run_ba(self, frame_id, counter):
        edge_ids = self.graph.live_edge_ids()
        if frame_id + 1 < self.config.opt_window or not edge_ids:
            return
        centers, depths, fi, fj = self._edge_arrays(edge_ids)
        patch_ids = sorted({self.graph.edges[e].patch_id for e in edge_ids})
        depth_slot = {pid: i for i, pid in enumerate(patch_ids)}
        window = [f for f in range(frame_id - self.config.opt_window + 1, frame_id + 1)]
        problem = BAProblem(
            poses=self.poses,
            inv_depths=np.array([self.graph.patches[p].inv_depth for p in patch_ids]),
            intrinsics=self.feat_intrinsics,
            active_frames=window[1:],      # first pose in the window is gauge
            frame_i=fi,
            frame_j=fj,
            center=centers,
            depth_index=np.array([depth_slot[self.graph.edges[e].patch_id]
                                  for e in edge_ids]),
            target=np.stack([self.graph.edges[e].target for e in edge_ids]),
            weight=np.array([self.graph.edges[e].confidence for e in edge_ids]),
            huber_delta=self.config.huber_delta,
        )
        iterations = (self.config.ba_iterations if self.ba_has_run
                      else self.config.ba_init_iterations)
        poses, inv_depths, _ = ba_solve(problem, iterations,
                                        self.config.lm_lambda0, counter)
        self.poses.update(poses)
        for pid, slot in depth_slot.items():
            self.graph.patches[pid].inv_depth = float(inv_depths[slot])
        self.ba_has_run = True

    def _prune(self):
        if self.config.prune_threshold <= 0:
            return 0
        rel_cache = {}

        def reprojector(edge):
            patch = self.graph.patches[edge.patch_id]
            key = (patch.frame_id, edge.target_frame_id)
            if key not in rel_cache:
                rel_cache[key] = self.poses[key[1]].compose(
                    self.poses[key[0]].inverse())
            rel = rel_cache[key]
            intr = self.feat_intrinsics
            n = np.array([(patch.center[0] - intr.cx) / intr.fx,
                          (patch.center[1] - intr.cy) / intr.fy, 1.0])
            x = rel.apply(n / patch.inv_depth)
            if x[2] <= 1e-8:
                return patch.center
            return np.array([intr.fx * x[0] / x[2] + intr.cx,
                             intr.fy * x[1] / x[2] + intr.cy])

        return self.graph.prune_static_edges(reprojector,
                                             self.config.prune_threshold)

    # -- main entry -------------------------------------------------------

    def step(self, evg):
        """Process one voxel grid and return this frame's statistics."""
        counters = {b: MacCounter() for b in BLOCKS}
        esig = MacCounter()
        times = {}
        frame_id = evg.frame_id

        t0 = time.perf_counter()
        fs = extract_features(evg, self.weights, self.config,
                              counters["patchifier"])
        patches = sample_patches(fs, self.config,
                                 seed=np.random.SeedSequence(
                                     (self.seed, frame_id)).generate_state(1)[0])
        times["patchifier"] = time.perf_counter() - t0

        self._init_pose(frame_id)
        self.timestamps[frame_id] = 0.5 * (evg.t_start + evg.t_end) * 1e-6

        t0 = time.perf_counter()
        # the graph keeps only what correlation needs from the feature set
        stored = FeatureSet(mf=fs.mf, cf=None, pyr=fs.pyr,
                            frame_id=frame_id, density=None)
        self.graph.add_frame(stored, patches)
        self._init_new_targets()
        mem_peak = (self.graph.payload_bytes() + self.weights.total_bytes()
                    + fs.cf.nbytes + fs.density.nbytes)
        self.graph.remove_expired()
        times["graph"] = time.perf_counter() - t0

        edges_live = self.graph.num_edges
        for _ in range(self.config.update_iterations):
            edge_ids = self.graph.live_edge_ids()
            if edge_ids:
                t_corr, t_upd = self._run_update(edge_ids, counters, esig)
                times["correlation"] = times.get("correlation", 0.0) + t_corr
                times["update"] = times.get("update", 0.0) + t_upd
            t0 = time.perf_counter()
            self._run_ba(frame_id, counters["ba"])
            times["ba"] = times.get("ba", 0.0) + time.perf_counter() - t0
            self._prune()

        frame_stats = FrameStats(
            frame_id=frame_id,
            edges_live=edges_live,
            e_sigma=esig.total,
            macs={b: counters[b].total for b in BLOCKS},
            mem_bytes=mem_peak,
            times=times,
        )
        self.stats.add(frame_stats)
        return frame_stats

    def trajectory(self):
        """Camera-to-world trajectory of all frames processed so far."""
        ids = sorted(self.poses)
        positions, quats, stamps = [], [], []
        for fid in ids:
            inv = self.poses[fid].inverse()
            positions.append(inv.t)
            quats.append(inv.q)
            stamps.append(self.timestamps.get(fid, float(fid)))
        if not ids:
            return Trajectory.empty()
        return Trajectory(np.array(stamps), np.array(positions), np.array(quats))


def run(inputs, weights, config, intrinsics=None, seed=0, window_us=40000):
    """Run the pipeline over voxel grids (or raw events) and collect stats.

    ``inputs`` is a sequence of :class:`EventVoxelGrid`, or a sorted list of
    :class:`Event` which is then sliced into fixed-duration grids.
    Returns ``(trajectory, stats)``; deterministic for a fixed seed.
    """
    inputs = list(inputs)
    if inputs and isinstance(inputs[0], Event):
        inputs = slice_fixed_duration(inputs, window_us, config.bins,
                                      config.width, config.height)
    pipeline = VOPipeline(config, weights, intrinsics, seed)
    for evg in inputs:
        pipeline.step(evg)
    return pipeline.trajectory(), pipeline.stats


# -- geometry-only test harness -----------------------------------------


@dataclass
class SyntheticScene:
    """Known camera motion and structure for geometry-only runs."""

    poses: list                 # SE3 world-to-camera, pose 0 = identity
    points: np.ndarray          # (M, 3) world points
    intrinsics: CameraIntrinsics  # on the quarter-resolution feature grid
    timestamps: np.ndarray      # (N,) seconds

    def gt_trajectory(self):
        positions = np.stack([p.inverse().t for p in self.poses])
        quats = np.stack([p.inverse().q for p in self.poses])
        return Trajectory(self.timestamps, positions, quats)

    def project(self, frame, point_rows=None):
        """Project world points into a frame; returns (uv, depth)."""
        pts = self.points if point_rows is None else self.points[point_rows]
        x = self.poses[frame].apply(pts)
        intr = self.intrinsics
        uv = np.stack([intr.fx * x[:, 0] / x[:, 2] + intr.cx,
                       intr.fy * x[:, 1] / x[:, 2] + intr.cy], axis=1)
        return uv, x[:, 2]


def make_synthetic_scene(config, n_frames=20, n_points=400, seed=0,
                         step=0.15, fps=25.0):
    """Forward-dominant smooth motion over a deep point cloud."""
    rng = np.random.default_rng(seed)
    points = np.stack([
        rng.uniform(-4.0, 4.0, n_points),
        rng.uniform(-3.0, 3.0, n_points),
        rng.uniform(5.0, 12.0, n_points),
    ], axis=1)
    poses = []
    for k in range(n_frames):
        pos = np.array([step * k, 0.4 * np.sin(k / 4.0), 0.25 * np.sin(k / 6.0)])
        w = np.array([0.01 * np.sin(k / 5.0), 0.015 * np.sin(k / 7.0), 0.008 * k / max(n_frames, 1)])
        if k == 0:
            pos[:] = 0.0
            w[:] = 0.0
        from .geometry import se3_exp
        cam_to_world = se3_exp(np.concatenate([pos, w]))
        poses.append(cam_to_world.inverse())
    intr = CameraIntrinsics.default_for(config.width, config.height).scaled(0.25)
    stamps = np.arange(n_frames) / fps
    return SyntheticScene(poses=poses, points=points, intrinsics=intr,
                          timestamps=stamps)


def bypass_with_oracle_flow(scene, config, noise_sigma=0.0, conf_dropout=0.0,
                            seed=0):
    """Run graph + bundle adjustment with ground-truth flow targets.

    Replaces the learned flow path: every edge's target is the exact
    reprojection of its patch's world point into the target frame (plus
    optional Gaussian noise in feature pixels); confidences are one except
    for a ``conf_dropout`` fraction forced to zero. Pruning is disabled so
    the solver keeps its constraints. Isolates the geometry from learning.
    """
    from .graph import Patch

    if conf_dropout < 0 or conf_dropout >= 1:
        raise ValidationError("conf_dropout must be in [0, 1)")
    rng = np.random.default_rng(seed)
    config = config.replace(prune_threshold=0.0)
    n_frames = len(scene.poses)
    n = config.patches_per_frame
    if len(scene.points) < n_frames * n:
        raise ValidationError(
            f"scene has {len(scene.points)} points, needs {n_frames * n}")

    pipeline = VOPipeline(config, weights=None, intrinsics=None, seed=seed)
    pipeline.feat_intrinsics = scene.intrinsics
    patch_point = {}   # patch_id -> world point row

    for fid in range(n_frames):
        pipeline._init_pose(fid)
        pipeline.timestamps[fid] = float(scene.timestamps[fid])
        rows = np.arange(fid * n, fid * n + n)
        uv, depth = scene.project(fid, rows)
        if np.any(depth <= 0):
            raise ValidationError(f"scene point behind camera at frame {fid}")
        patches = [Patch(patch_id=-1, frame_id=fid, center=uv[i].copy(),
                         feature=np.zeros((3, 3, 1), dtype=np.float32),
                         context=np.zeros(1, dtype=np.float32))
                   for i in range(n)]
        new_ids = pipeline.graph.add_frame(
            FeatureSet(mf=np.zeros((1, 1, 1), dtype=np.float32), cf=None,
                       pyr=None, frame_id=fid), patches)
        for i, pid in enumerate(new_ids):
            patch_point[pid] = rows[i]
        pipeline.graph.remove_expired()

        # oracle flow: exact ground-truth reprojection per fresh edge
        for eid in pipeline.graph.live_edge_ids():
            edge = pipeline.graph.edges[eid]
            if np.all(np.isfinite(edge.target)):
                continue
            point_row = patch_point[edge.patch_id]
            uv_t, depth_t = scene.project(edge.target_frame_id, [point_row])
            target = uv_t[0]
            if noise_sigma > 0:
                target = target + noise_sigma * rng.standard_normal(2)
            edge.target = target
            edge.confidence = 0.0 if rng.random() < conf_dropout else 1.0

        pipeline._run_ba(fid, counter=None)

    return pipeline.trajectory()
