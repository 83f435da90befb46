import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchvo.errors import ConfigError, OrderingError, ParseError, ValidationError
from patchvo.events import (Event, build_voxel_grid, parse_event_stream,
                            slice_fixed_count, slice_fixed_duration,
                            write_events_binary, write_events_csv)

W, H = 240, 180


def make_events(n, seed=0, t_max=100000):
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.integers(0, t_max, n))
    return [Event(int(t), int(rng.integers(0, W)), int(rng.integers(0, H)),
                  int(rng.choice([-1, 1]))) for t in ts]


class TestParsing:
    def test_empty_input(self):
        assert parse_event_stream(b"", "csv", W, H) == []
        assert parse_event_stream(b"", "binary", W, H) == []

    def test_csv_single_line(self):
        events = parse_event_stream(b"1000,10,20,1\n", "csv", W, H)
        assert events == [Event(1000, 10, 20, 1)]

    def test_csv_zero_polarity_maps_to_minus_one(self):
        events = parse_event_stream(b"5,1,2,0", "csv", W, H)
        assert events[0].polarity == -1

    def test_binary_round_trip(self):
        events = make_events(10000, seed=3)
        buf = io.BytesIO()
        write_events_binary(events, buf)
        parsed = parse_event_stream(buf.getvalue(), "binary", W, H)
        assert parsed == events

    def test_csv_round_trip(self):
        events = make_events(500, seed=4)
        buf = io.BytesIO()
        write_events_csv(events, buf)
        assert parse_event_stream(buf.getvalue(), "csv", W, H) == events

    def test_malformed_csv_reports_offset(self):
        data = b"1,2,3,1\nbogus line\n"
        with pytest.raises(ParseError) as err:
            parse_event_stream(data, "csv", W, H)
        assert err.value.offset == 8

    def test_truncated_binary_record(self):
        events = make_events(3)
        buf = io.BytesIO()
        write_events_binary(events, buf)
        with pytest.raises(ParseError):
            parse_event_stream(buf.getvalue()[:-1], "binary", W, H)

    def test_out_of_range_coordinate(self):
        with pytest.raises(ValidationError):
            parse_event_stream(f"0,{W},5,1".encode(), "csv", W, H)

    def test_non_monotone_timestamps_rejected(self):
        with pytest.raises(OrderingError):
            parse_event_stream(b"10,1,1,1\n5,1,1,1\n", "csv", W, H)

    def test_unknown_format(self):
        with pytest.raises(ValidationError):
            parse_event_stream(b"", "aedat", W, H)


class TestVoxelGrid:
    def test_empty_events_zero_grid(self):
        grid = build_voxel_grid([], 0, 1000, 5, W, H)
        assert grid.bins.shape == (5, H, W)
        assert grid.total_mass() == 0.0

    def test_event_on_exact_bin(self):
        # tau = (500 - 0) * 4 / 1000 = 2.0 exactly
        grid = build_voxel_grid([Event(500, 7, 9, 1)], 0, 1000, 5, W, H)
        assert grid.bins[2, 9, 7] == 1.0
        assert grid.total_mass() == 1.0
        assert np.count_nonzero(grid.bins) == 1

    def test_mass_conservation_random(self):
        events = make_events(1000, seed=1)
        grid = build_voxel_grid(events, 0, 100000, 5, W, H)
        assert abs(grid.total_mass() - sum(e.polarity for e in events)) < 1e-6

    def test_permutation_invariance_bit_identical(self):
        events = make_events(2000, seed=2)
        grid_a = build_voxel_grid(events, 0, 100000, 5, W, H)
        rng = np.random.default_rng(0)
        shuffled = [events[i] for i in rng.permutation(len(events))]
        grid_b = build_voxel_grid(shuffled, 0, 100000, 5, W, H)
        assert np.array_equal(grid_a.bins, grid_b.bins)

    def test_determinism(self):
        events = make_events(500, seed=5)
        a = build_voxel_grid(events, 0, 100000, 5, W, H)
        b = build_voxel_grid(events, 0, 100000, 5, W, H)
        assert np.array_equal(a.bins, b.bins)

    def test_event_outside_window_rejected(self):
        with pytest.raises(ValidationError):
            build_voxel_grid([Event(1000, 1, 1, 1)], 0, 1000, 5, W, H)

    def test_zero_bins_rejected(self):
        with pytest.raises(ConfigError):
            build_voxel_grid([], 0, 1000, 0, W, H)

    def test_single_bin_accumulates_everything(self):
        events = make_events(200, seed=6)
        grid = build_voxel_grid(events, 0, 100000, 1, W, H)
        assert abs(grid.total_mass() - sum(e.polarity for e in events)) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 9999), st.integers(0, W - 1),
                              st.integers(0, H - 1), st.sampled_from([-1, 1])),
                    max_size=200),
           st.integers(1, 7))
    def test_conservation_property(self, rows, bins):
        events = [Event(t, x, y, p) for t, x, y, p in sorted(rows)]
        grid = build_voxel_grid(events, 0, 10000, bins, W, H)
        assert abs(grid.total_mass() - sum(e.polarity for e in events)) < 1e-6


class TestSlicing:
    def test_fixed_duration_counts(self):
        events = make_events(3000, seed=7, t_max=99999)
        grids = slice_fixed_duration(events, 10000, 5, W, H)
        assert len(grids) == 10
        assert [g.frame_id for g in grids] == list(range(10))
        total = sum(g.total_mass() for g in grids)
        assert abs(total - sum(e.polarity for e in events)) < 1e-6

    def test_fixed_count(self):
        events = make_events(1050, seed=8)
        grids = slice_fixed_count(events, 100, 5, W, H)
        assert len(grids) == 10

    def test_empty(self):
        assert slice_fixed_duration([], 1000, 5, W, H) == []
