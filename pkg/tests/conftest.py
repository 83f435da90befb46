import numpy as np
import pytest

from patchvo.config import CameraIntrinsics, ModelConfig
from patchvo.geometry import SE3, se3_exp
from patchvo.weights import init_random


def small_config(**overrides):
    """A fast configuration for unit tests (tiny maps, thin update block)."""
    params = dict(
        width=64, height=48, bins=5,
        mf_channels=16, cf_channels=24,
        patches_per_frame=8, removal_window=4, patch_lifetime=3,
        opt_window=4, corr_radius=2,
        use_pyramid=False, use_bypass=False, use_gru=False,
    )
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture(scope="session")
def tiny_weights_small():
    return init_random(small_config(), seed=7)


def random_pose(rng, trans_scale=1.0):
    q = rng.standard_normal(4)
    return SE3(q / np.linalg.norm(q), trans_scale * rng.standard_normal(3))


def random_small_motion(rng, scale=0.1):
    return se3_exp(scale * rng.standard_normal(6))


def simulate_edge_count(n_patches, removal_window, patch_lifetime, frames):
    """Naive set-based frame-by-frame edge simulation (independent oracle).

    Mirrors the documented conventions only: edges within lifetime - 1
    frames of the patch's birth (own frame included), patches expiring after
    removal_window + 1 frames. Returns the live edge count after the last
    frame's expiry.
    """
    live = []      # (birth_frame, index)
    edges = set()
    for t in range(frames):
        new = [(t, i) for i in range(n_patches)]
        for b, i in new:
            for j in range(max(0, t - patch_lifetime + 1), t + 1):
                edges.add((b, i, j))
        for b, i in live:
            if t - b <= patch_lifetime - 1:
                edges.add((b, i, t))
        live += new
        live = [(b, i) for b, i in live if t - b <= removal_window]
        edges = {(b, i, j) for (b, i, j) in edges if t - b <= removal_window}
    return len(edges)
