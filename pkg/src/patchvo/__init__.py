"""Sparse patch-graph visual odometry for event cameras.

Library layout mirrors the pipeline stages: ``events`` (stream parsing and
voxel grids), ``patchifier`` (feature extraction and patch sampling),
``graph`` (the patch graph), ``correlation``, ``update`` (the recurrent
operator), ``ba`` (bundle adjustment), ``pipeline`` (orchestration),
``evaluation`` (trajectory metrics), and ``costsweep`` (the analytic cost
model plus sweep tooling). The ``patchvo`` console script exposes the
run/eval/cost/sweep commands.
"""

from .config import CameraIntrinsics, ModelConfig
from .graph import n_edges

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "ModelConfig", "n_edges", "__version__"]
