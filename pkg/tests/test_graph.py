import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchvo.errors import SequencingError
from patchvo.graph import Patch, PatchGraph, n_edges

from conftest import simulate_edge_count, small_config


def make_patches(config, n=None):
    n = n if n is not None else config.patches_per_frame
    return [Patch(patch_id=-1, frame_id=-1,
                  center=np.array([2.0 + i, 2.0]),
                  feature=np.zeros((3, 3, config.mf_channels), dtype=np.float32),
                  context=np.zeros(config.cf_channels, dtype=np.float32))
            for i in range(n)]


def warmed_graph(config, frames=None):
    g = PatchGraph(config)
    frames = frames or (config.removal_window + config.patch_lifetime + 3)
    for fid in range(frames):
        g.add_frame(type("F", (), {"frame_id": fid})(), make_patches(config))
        g.remove_expired()
    return g


class TestClosedForm:
    def test_paper_values(self):
        assert n_edges(96, 22, 13) == 47712
        assert n_edges(96, 22, 10) == 37632
        assert n_edges(24, 12, 10) == 4848

    def test_zero_patches(self):
        assert n_edges(0, 22, 13) == 0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            n_edges(-1, 2, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 96), st.integers(1, 22), st.integers(1, 13))
    def test_matches_brute_force_simulation(self, n, rw, plt):
        frames = rw + plt + 3
        assert simulate_edge_count(n, rw, plt, frames) == n_edges(n, rw, plt)


class TestAddFrame:
    def test_first_frame_edges(self):
        config = small_config(patches_per_frame=24, removal_window=12,
                              patch_lifetime=10)
        g = PatchGraph(config)
        g.add_frame(type("F", (), {"frame_id": 0})(), make_patches(config))
        assert g.num_edges == 24
        # every edge targets the patch's own frame
        assert all(e.target_frame_id == 0 for e in g.edges.values())

    def test_warmed_count_matches_closed_form(self):
        config = small_config(patches_per_frame=24, removal_window=12,
                              patch_lifetime=10)
        g = warmed_graph(config, frames=12 + 10 + 1)
        assert g.num_edges == n_edges(24, 12, 10) == 4848

    def test_non_consecutive_frame_rejected(self):
        config = small_config()
        g = PatchGraph(config)
        g.add_frame(type("F", (), {"frame_id": 0})(), make_patches(config))
        with pytest.raises(SequencingError):
            g.add_frame(type("F", (), {"frame_id": 0})(), make_patches(config))

    def test_hidden_states_zero_initialized(self):
        config = small_config()
        g = warmed_graph(config, frames=3)
        assert all(np.all(e.hidden == 0) for e in g.edges.values())

    def test_inv_depth_seeded_from_median(self):
        config = small_config()
        g = PatchGraph(config)
        g.add_frame(type("F", (), {"frame_id": 0})(), make_patches(config))
        for p in g.patches.values():
            p.inv_depth = 0.25
        g.add_frame(type("F", (), {"frame_id": 1})(), make_patches(config))
        new = [p for p in g.patches.values() if p.frame_id == 1]
        assert all(p.inv_depth == 0.25 for p in new)


class TestExpiry:
    def test_young_graph_no_removals(self):
        config = small_config(removal_window=8, patch_lifetime=3)
        g = PatchGraph(config)
        for fid in range(3):
            g.add_frame(type("F", (), {"frame_id": fid})(), make_patches(config))
            assert g.remove_expired() == 0

    def test_steady_state_removes_one_cohort(self):
        config = small_config(patches_per_frame=8, removal_window=4,
                              patch_lifetime=3)
        g = warmed_graph(config)
        before = g.num_patches
        g.add_frame(type("F", (), {"frame_id": g.current_frame_id + 1})(),
                    make_patches(config))
        removed_nodes = sum(1 for p in g.patches.values()
                            if g.current_frame_id - p.frame_id
                            > config.removal_window)
        assert removed_nodes == config.patches_per_frame
        g.remove_expired()
        assert g.num_patches == before

    def test_count_restored_after_removal(self):
        config = small_config(patches_per_frame=8, removal_window=4,
                              patch_lifetime=3)
        g = warmed_graph(config)
        expected = n_edges(8, 4, 3)
        for _ in range(5):
            g.add_frame(type("F", (), {"frame_id": g.current_frame_id + 1})(),
                        make_patches(config))
            g.remove_expired()
            assert g.num_edges == expected

    def test_lifetimes_bounded(self):
        config = small_config(patches_per_frame=4, removal_window=5,
                              patch_lifetime=4)
        g = PatchGraph(config)
        for fid in range(20):
            g.add_frame(type("F", (), {"frame_id": fid})(), make_patches(config))
            g.remove_expired()
            cur = g.current_frame_id
            assert all(cur - p.frame_id <= config.removal_window
                       for p in g.patches.values())
            assert all(abs(e.target_frame_id - g.patches[e.patch_id].frame_id)
                       <= config.patch_lifetime
                       for e in g.edges.values())
            assert g.frame_span() <= config.removal_window + config.patch_lifetime


class TestPruning:
    def test_identity_poses_prune_everything(self):
        config = small_config()
        g = warmed_graph(config)
        # zero displacement for every edge: reprojection equals the center
        pruned = g.prune_static_edges(
            lambda e: g.patches[e.patch_id].center, threshold=0.5)
        assert pruned > 0
        assert g.num_edges == 0

    def test_zero_threshold_prunes_nothing(self):
        config = small_config()
        g = warmed_graph(config)
        before = g.num_edges
        assert g.prune_static_edges(lambda e: g.patches[e.patch_id].center,
                                    threshold=0.0) == 0
        assert g.num_edges == before

    def test_displacement_above_threshold_kept(self):
        config = small_config()
        g = warmed_graph(config)
        before = g.num_edges
        shift = np.array([3.0, 0.0])
        assert g.prune_static_edges(
            lambda e: g.patches[e.patch_id].center + shift, threshold=0.5) == 0
        assert g.num_edges == before

    def test_idempotent(self):
        config = small_config()
        g = warmed_graph(config)
        rng = np.random.default_rng(0)
        offsets = {eid: rng.uniform(0, 1.2, 2) for eid in g.edges}

        def reprojector(e):
            return g.patches[e.patch_id].center + offsets[e.edge_id]

        first = g.prune_static_edges(reprojector, threshold=0.7)
        assert first > 0
        assert g.prune_static_edges(reprojector, threshold=0.7) == 0


class TestDump:
    def test_adjacency_listing(self):
        config = small_config(patches_per_frame=2, removal_window=3,
                              patch_lifetime=2)
        g = PatchGraph(config)
        g.add_frame(type("F", (), {"frame_id": 0})(), make_patches(config, 2))
        lines = g.dump().splitlines()
        assert lines == ["0 0 0 0", "1 1 0 0"]
