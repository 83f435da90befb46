"""The patch graph: sampled feature patches (nodes) connected to retained
frames (edges), with expiry and motion-based pruning.

Conventions (these reproduce the closed-form edge count exactly, which the
tests verify by brute force):

* a patch born at frame ``b`` forms an edge to every frame ``j`` with
  ``|j - b| <= patch_lifetime - 1``, including its own frame;
* a patch stays in the graph for ``removal_window + 1`` frames (ages
  ``0..removal_window``), after which :meth:`PatchGraph.remove_expired`
  drops it together with its incident edges;
* frames are retained while any live patch may still reference them
  (``removal_window + patch_lifetime`` ids after expiry; one more
  transiently between ``add_frame`` and ``remove_expired``).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SequencingError


def n_edges(patches_per_frame, removal_window, patch_lifetime):
    """Closed-form worst-case live edge count of a fully warmed-up graph.

    Exact integer arithmetic:
    ``N * ((R+1)*P + m*(2*(R+1) - 1 - m) // 2)`` with
    ``m = min(P - 1, R)`` clamped to zero.
    """
    n, r, p = int(patches_per_frame), int(removal_window), int(patch_lifetime)
    if min(n, r, p) < 0:
        raise ValueError("all arguments must be non-negative")
    if n == 0 or p == 0:
        return 0
    m = max(0, min(p - 1, r))
    return n * ((r + 1) * p + m * (2 * (r + 1) - 1 - m) // 2)


@dataclass
class Patch:
    """A 3x3 feature slice sampled from a matching-feature map."""

    patch_id: int
    frame_id: int
    center: np.ndarray        # (u, v) in quarter-resolution feature units
    feature: np.ndarray       # (3, 3, mf_channels)
    context: np.ndarray       # (cf_channels,)
    inv_depth: float = 1.0    # > 0; optimized by bundle adjustment


@dataclass
class Edge:
    edge_id: int
    patch_id: int
    target_frame_id: int
    hidden: np.ndarray        # (cf_channels,) update-operator state
    target: np.ndarray        # (u, v) current flow target in the target frame
    last_flow: np.ndarray     # (du, dv) most recent predicted delta
    confidence: float = 0.0


@dataclass
class FrameRecord:
    frame_id: int
    features: object = None   # FeatureSet; may be None in geometry-only runs
    timestamp: float = 0.0


class PatchGraph:
    """Single-writer container for patches, edges, and retained frames."""

    def __init__(self, config):
        self.config = config
        self.frames = {}            # frame_id -> FrameRecord
        self.patches = {}           # patch_id -> Patch
        self.edges = {}             # edge_id -> Edge
        self.current_frame_id = -1
        self._next_patch_id = 0
        self._next_edge_id = 0

    # -- queries --------------------------------------------------------

    def live_patch_ids(self):
        return sorted(self.patches)

    def live_edge_ids(self):
        return sorted(self.edges)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def num_patches(self):
        return len(self.patches)

    def retained_frame_ids(self):
        return sorted(self.frames)

    def frame_span(self):
        if not self.frames:
            return 0
        ids = self.frames.keys()
        return max(ids) - min(ids) + 1

    # -- mutation -------------------------------------------------------

    def add_frame(self, features, patches, timestamp=0.0):
        """Insert the next frame with its sampled patches and grow the edge set.

        New edges: (a) each new patch to every retained frame within the
        lifetime (own frame included), (b) every existing patch within the
        lifetime to the new frame. Hidden states start at zero; flow targets
        are filled in by the pipeline once poses exist.
        """
        frame_id = getattr(features, "frame_id", None)
        if frame_id is None:
            frame_id = self.current_frame_id + 1
        if frame_id != self.current_frame_id + 1:
            raise SequencingError(
                f"expected frame {self.current_frame_id + 1}, got {frame_id}"
            )
        self.current_frame_id = frame_id
        self.frames[frame_id] = FrameRecord(frame_id, features, timestamp)

        lifetime = self.config.patch_lifetime
        cf = self.config.cf_channels

        # median inverse depth of live patches seeds the new ones
        if self.patches:
            seed_depth = float(np.median([p.inv_depth for p in self.patches.values()]))
        else:
            seed_depth = 1.0

        new_ids = []
        for patch in patches:
            patch.patch_id = self._next_patch_id
            self._next_patch_id += 1
            patch.frame_id = frame_id
            patch.inv_depth = seed_depth
            self.patches[patch.patch_id] = patch
            new_ids.append(patch.patch_id)

        # (a) new patches -> retained frames within lifetime (incl. own frame)
        for pid in new_ids:
            for fid in sorted(self.frames):
                if frame_id - fid <= lifetime - 1:
                    self._add_edge(pid, fid, cf)
        # (b) older live patches -> the new frame
        for pid in sorted(self.patches):
            patch = self.patches[pid]
            if patch.frame_id != frame_id and frame_id - patch.frame_id <= lifetime - 1:
                self._add_edge(pid, frame_id, cf)
        return new_ids

    def _add_edge(self, patch_id, target_frame_id, cf_channels):
        edge = Edge(
            edge_id=self._next_edge_id,
            patch_id=patch_id,
            target_frame_id=target_frame_id,
            hidden=np.zeros(cf_channels, dtype=np.float32),
            target=np.full(2, np.nan),
            last_flow=np.zeros(2),
        )
        self._next_edge_id += 1
        self.edges[edge.edge_id] = edge
        return edge

    def remove_expired(self):
        """Drop patches older than the removal window and frames beyond reach.

        Returns the number of removed patches plus removed edges.
        """
        cur = self.current_frame_id
        rw = self.config.removal_window
        keep_frames_from = cur - (rw + self.config.patch_lifetime) + 1

        dead_patches = [pid for pid, p in self.patches.items()
                        if cur - p.frame_id > rw]
        removed = len(dead_patches)
        if dead_patches:
            dead_set = set(dead_patches)
            dead_edges = [eid for eid, e in self.edges.items()
                          if e.patch_id in dead_set]
            for eid in dead_edges:
                del self.edges[eid]
            for pid in dead_patches:
                del self.patches[pid]
            removed += len(dead_edges)

        for fid in [f for f in self.frames if f < keep_frames_from]:
            del self.frames[fid]
        return removed

    def prune_static_edges(self, reprojector, threshold=None):
        """Remove edges whose pose-induced displacement is below ``threshold``.

        ``reprojector(edge) -> (u, v)`` maps an edge to the current
        reprojection of its patch center in the target frame. Displacement is
        measured against the patch's own center; the comparison is strict, so
        a threshold of zero prunes nothing. Idempotent for fixed poses.
        """
        if threshold is None:
            threshold = self.config.prune_threshold
        if threshold <= 0:
            return 0
        doomed = []
        for eid in sorted(self.edges):
            edge = self.edges[eid]
            patch = self.patches[edge.patch_id]
            displaced = np.asarray(reprojector(edge), dtype=np.float64)
            if np.linalg.norm(displaced - patch.center) < threshold:
                doomed.append(eid)
        for eid in doomed:
            del self.edges[eid]
        return len(doomed)

    def dump(self):
        """Text adjacency listing, one edge per line, for test oracles."""
        lines = []
        for eid in sorted(self.edges):
            e = self.edges[eid]
            p = self.patches[e.patch_id]
            lines.append(f"{eid} {e.patch_id} {p.frame_id} {e.target_frame_id}")
        return "\n".join(lines)

    def payload_bytes(self):
        """Payload bytes held by retained features, patches, and edges."""
        from .costs import featureset_bytes, patch_bytes, edge_bytes
        total = 0
        for record in self.frames.values():
            if record.features is not None:
                total += featureset_bytes(record.features)
        total += sum(patch_bytes(p) for p in self.patches.values())
        total += sum(edge_bytes(e, self.config) for e in self.edges.values())
        return total
