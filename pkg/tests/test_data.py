"""Data pipeline: files, synthetic generator, windowing, scaling, diagnostics."""

import numpy as np
import pytest

from histm.data import (GridSeries, SampleWindow, ScalerParams, WindowSpec,
                        approximate_entropy, build_sample_set, chronological_split,
                        generate_synthetic, lag_autocorrelation, load_long_csv,
                        load_series, make_window_index, materialize_sample,
                        read_dense_grid, save_long_csv, scaler_apply, scaler_fit,
                        scaler_invert, window_count, write_dense_grid)
from histm.errors import (NumericDomainError, ParseError, UsageError,
                          ValidationError)


def tiny_series(frames):
    return GridSeries(np.asarray(frames, dtype=np.float32), 10)


class TestLongCsv:
    def test_single_cell_two_frames(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("# H=1 W=1 interval=10 channel=net\n"
                     "t,row,col,value\n0,0,0,3\n1,0,0,4\n")
        s = load_long_csv(p)
        assert s.t_total == 2 and s.height == 1 and s.width == 1
        assert s.frames[0, 0, 0] == 3.0 and s.frames[1, 0, 0] == 4.0
        assert s.interval_minutes == 10 and s.channel_name == "net"

    def test_sparse_cells_read_zero(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("# H=2 W=2 interval=10 channel=net\n"
                     "t,row,col,value\n0,0,0,5\n")
        s = load_long_csv(p)
        assert s.frames[0, 1, 1] == 0.0 and s.frames[0, 0, 0] == 5.0

    def test_round_trip_value_identical(self, tmp_path):
        series = generate_synthetic(6, 5, 1, 60, seed=3)
        p = tmp_path / "rt.csv"
        save_long_csv(series, p)
        back = load_long_csv(p)
        np.testing.assert_array_equal(series.frames, back.frames)
        assert back.interval_minutes == series.interval_minutes

    def test_malformed_row_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("# H=1 W=1 interval=10 channel=n\n"
                     "t,row,col,value\n0,0,0,1\nnot-a-number,0,0,2\n")
        with pytest.raises(ParseError, match="line 4"):
            load_long_csv(p)

    def test_negative_value_rejected(self, tmp_path):
        p = tmp_path / "neg.csv"
        p.write_text("# H=1 W=1 interval=10 channel=n\n"
                     "t,row,col,value\n0,0,0,-2\n")
        with pytest.raises(ValidationError, match="negative"):
            load_long_csv(p)

    def test_duplicate_key_rejected(self, tmp_path):
        p = tmp_path / "dup.csv"
        p.write_text("# H=1 W=1 interval=10 channel=n\n"
                     "t,row,col,value\n0,0,0,1\n0,0,0,2\n")
        with pytest.raises(ValidationError, match="duplicate"):
            load_long_csv(p)

    def test_missing_preamble_rejected(self, tmp_path):
        p = tmp_path / "nop.csv"
        p.write_text("t,row,col,value\n0,0,0,1\n")
        with pytest.raises(ParseError, match="line 1"):
            load_long_csv(p)

    def test_out_of_grid_cell_rejected(self, tmp_path):
        p = tmp_path / "oob.csv"
        p.write_text("# H=2 W=2 interval=10 channel=n\n"
                     "t,row,col,value\n0,5,0,1\n")
        with pytest.raises(ValidationError, match="outside"):
            load_long_csv(p)


class TestDenseBinary:
    def test_round_trip(self, tmp_path):
        series = generate_synthetic(4, 7, 1, 30, seed=9)
        p = tmp_path / "g.grid"
        write_dense_grid(series, p)
        back = read_dense_grid(p)
        np.testing.assert_array_equal(series.frames, back.frames)
        assert back.interval_minutes == series.interval_minutes

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.grid"
        p.write_bytes(b"XXXXX" + b"\x00" * 32)
        with pytest.raises(ParseError, match="magic"):
            read_dense_grid(p)

    def test_truncated_payload_rejected(self, tmp_path):
        series = generate_synthetic(3, 3, 1, 60, seed=1)
        p = tmp_path / "t.grid"
        write_dense_grid(series, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-8])
        with pytest.raises(ParseError, match="payload"):
            read_dense_grid(p)

    def test_load_series_dispatches_on_content(self, tmp_path):
        series = generate_synthetic(3, 3, 1, 60, seed=2)
        csv_p, bin_p = tmp_path / "a.csv", tmp_path / "a.grid"
        save_long_csv(series, csv_p)
        write_dense_grid(series, bin_p)
        np.testing.assert_array_equal(load_series(csv_p).frames,
                                      load_series(bin_p).frames)


class TestSyntheticGenerator:
    def test_determinism(self):
        a = generate_synthetic(8, 8, 2, 10, seed=5)
        b = generate_synthetic(8, 8, 2, 10, seed=5)
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_different_seeds_differ(self):
        a = generate_synthetic(8, 8, 1, 10, seed=5)
        b = generate_synthetic(8, 8, 1, 10, seed=6)
        assert not np.array_equal(a.frames, b.frames)

    def test_nonnegative(self):
        s = generate_synthetic(10, 10, 3, 10, seed=0)
        assert (s.frames >= 0).all()

    def test_daily_period_dominates_half_day(self):
        s = generate_synthetic(10, 10, 7, 10, seed=4)
        agg = s.frames.mean(axis=(1, 2))
        day = lag_autocorrelation(agg, 144)
        half = lag_autocorrelation(agg, 72)
        assert day > half

    def test_cell_more_entropic_than_aggregate(self):
        s = generate_synthetic(12, 12, 7, 10, seed=7)
        agg = s.frames.mean(axis=(1, 2))
        cell = s.frames[:, 6, 6]
        assert approximate_entropy(cell) > approximate_entropy(agg)

    def test_bad_dimensions_rejected(self):
        with pytest.raises(ValidationError):
            generate_synthetic(0, 5, 1)
        with pytest.raises(ValidationError):
            generate_synthetic(5, 5, 0)


class TestWindowIndex:
    def test_minimal_fit_single_sample(self):
        series = tiny_series(np.ones((7, 11, 11)))
        spec = WindowSpec(6, 11, 6)
        idx = make_window_index(series, spec)
        assert idx.shape == (1, 3)
        assert tuple(idx[0]) == (0, 5, 5)

    def test_paper_protocol_count(self):
        # H=W=100, K=11, T=6, stride 6, 144 frames: 23*90*90
        assert window_count(144, 100, 100, WindowSpec(6, 11, 6)) == 186_300

    def test_stride_one_two_temporal_starts(self):
        series = tiny_series(np.ones((8, 11, 11)))
        idx = make_window_index(series, WindowSpec(6, 11, 1))
        assert len(np.unique(idx[:, 0])) == 2

    def test_count_formula_matches_enumeration_fuzz(self, rng):
        for _ in range(50):
            k = int(rng.choice([1, 3, 5]))
            h = int(rng.integers(k, k + 6))
            w = int(rng.integers(k, k + 6))
            t_len = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 5))
            t_total = int(rng.integers(t_len + 1, t_len + 14))
            spec = WindowSpec(t_len, k, stride)
            # brute force: try every (t, i, j) and count the valid ones
            count = 0
            r = (k - 1) // 2
            for t in range(0, t_total, stride):
                if t + t_len > t_total - 1:
                    continue
                for i in range(h):
                    for j in range(w):
                        if r <= i < h - r and r <= j < w - r:
                            count += 1
            assert window_count(t_total, h, w, spec) == count
            series = tiny_series(np.ones((t_total, h, w)))
            assert len(make_window_index(series, spec)) == count

    def test_all_windows_inside_grid(self):
        series = generate_synthetic(9, 8, 1, 120, seed=1)
        spec = WindowSpec(3, 5, 2)
        for t, i, j in make_window_index(series, spec):
            sample = materialize_sample(series, t, i, j, spec)
            assert sample.input.shape == (3, 5, 5)

    def test_too_short_series_rejected(self):
        series = tiny_series(np.ones((3, 5, 5)))
        with pytest.raises(ValidationError):
            make_window_index(series, WindowSpec(6, 3, 1))


class TestMaterializeSample:
    def test_k1_center_history(self):
        frames = np.arange(5 * 4).reshape(5, 2, 2).astype(np.float32)
        series = tiny_series(frames)
        s = materialize_sample(series, 0, 1, 0, WindowSpec(3, 1, 1))
        np.testing.assert_array_equal(s.input[:, 0, 0], frames[:3, 1, 0])
        assert s.target == float(frames[3, 1, 0])

    def test_constant_series(self):
        series = tiny_series(np.full((4, 3, 3), 7.0))
        s = materialize_sample(series, 0, 1, 1, WindowSpec(2, 3, 1))
        assert (s.input == 7.0).all() and s.target == 7.0

    def test_against_direct_slicing(self, rng):
        frames = rng.uniform(0, 9, (10, 7, 7)).astype(np.float32)
        series = tiny_series(frames)
        spec = WindowSpec(4, 3, 1)
        s = materialize_sample(series, 2, 3, 4, spec)
        np.testing.assert_array_equal(s.input, frames[2:6, 2:5, 3:6])
        assert s.target == float(frames[6, 3, 4])
        assert s.origin == (2, 3, 4)

    def test_out_of_bounds_rejected(self):
        series = tiny_series(np.ones((6, 5, 5)))
        with pytest.raises(UsageError):
            materialize_sample(series, 0, 0, 0, WindowSpec(2, 3, 1))
        with pytest.raises(UsageError):
            materialize_sample(series, 4, 2, 2, WindowSpec(2, 3, 1))


class TestChronologicalSplit:
    def test_hundred(self):
        assert chronological_split(100) == [(0, 70), (70, 85), (85, 100)]

    def test_twenty_floor_rule(self):
        assert chronological_split(20) == [(0, 14), (14, 17), (17, 20)]

    def test_bad_fractions_rejected(self):
        with pytest.raises(ValidationError):
            chronological_split(100, fractions=(0.7, 0.2, 0.2))

    def test_min_len_enforced(self):
        with pytest.raises(ValidationError):
            chronological_split(20, min_len=7)

    def test_leakage_scan_fuzz(self, rng):
        for _ in range(20):
            t_total = int(rng.integers(40, 300))
            t_len = int(rng.integers(1, 7))
            stride = int(rng.integers(1, 7))
            ranges = chronological_split(t_total)
            series = tiny_series(np.ones((t_total, 3, 3)))
            spec = WindowSpec(t_len, 3, stride)
            prev_end = None
            for (a, b) in ranges:
                if b - a < t_len + 1:
                    continue
                idx = make_window_index(series, spec, (a, b))
                target_times = idx[:, 0] + t_len
                assert target_times.max() <= b - 1
                assert idx[:, 0].min() >= a
                if prev_end is not None:
                    assert idx[:, 0].min() >= prev_end
                prev_end = b


class TestScaler:
    def test_quarter_point(self):
        p = ScalerParams(0.0, 200.0)
        assert scaler_apply(50.0, p) == 0.25

    def test_clipping(self):
        p = ScalerParams(0.0, 200.0)
        assert scaler_apply(250.0, p) == 1.0
        assert scaler_apply(-10.0, p) == 0.0

    def test_round_trip_in_range(self, rng):
        p = ScalerParams(3.0, 97.0)
        x = rng.uniform(3.0, 97.0, 10_000)
        back = scaler_invert(scaler_apply(x, p), p)
        np.testing.assert_allclose(back, x, atol=1e-12)

    def test_degenerate_range_rejected(self):
        with pytest.raises(NumericDomainError):
            ScalerParams(5.0, 5.0)

    def test_fit_sees_only_training_values(self, rng):
        frames = rng.uniform(1.0, 2.0, (20, 5, 5)).astype(np.float32)
        frames[15:] *= 100.0  # large values only in the future
        series = tiny_series(frames)
        spec = WindowSpec(2, 3, 1)
        idx = make_window_index(series, spec, (0, 14))
        p = scaler_fit(series, idx, spec)
        assert p.max_v <= 2.0 + 1e-6

    def test_fit_covers_exact_sample_extrema(self, rng):
        frames = rng.uniform(1, 9, (12, 5, 5)).astype(np.float32)
        series = tiny_series(frames)
        spec = WindowSpec(3, 3, 2)
        idx = make_window_index(series, spec, (0, 12))
        p = scaler_fit(series, idx, spec)
        lo = np.inf
        hi = -np.inf
        for t, i, j in idx:
            s = materialize_sample(series, t, i, j, spec)
            lo = min(lo, s.input.min(), s.target)
            hi = max(hi, s.input.max(), s.target)
        assert p.min_v == pytest.approx(lo, abs=1e-6)
        assert p.max_v == pytest.approx(hi, abs=1e-6)

    def test_sample_set_values_in_unit_interval(self):
        series = generate_synthetic(8, 8, 2, 10, seed=3)
        spec = WindowSpec(6, 3, 6)
        splits = chronological_split(series.t_total, min_len=7)
        idx = make_window_index(series, spec, splits[0])
        scaler = scaler_fit(series, idx, spec)
        for rng_ in splits:
            ss = build_sample_set(series, rng_, spec, scaler)
            xs, ys = ss.gather(np.arange(min(64, len(ss))))
            assert xs.min() >= 0.0 and xs.max() <= 1.0
            assert ys.min() >= 0.0 and ys.max() <= 1.0


class TestApproximateEntropy:
    def test_constant_series_zero(self):
        assert approximate_entropy(np.ones(60)) == 0.0

    def test_strict_alternation_predictable(self):
        x = np.tile([0.0, 1.0], 500)
        assert abs(approximate_entropy(x, m=2, r=0.5)) < 1e-4

    def test_noise_more_entropic_than_sine(self, rng):
        t = np.arange(400)
        sine = np.sin(2 * np.pi * t / 50)
        noise = rng.standard_normal(400)
        assert approximate_entropy(noise) > approximate_entropy(sine)

    def test_too_short_rejected(self):
        with pytest.raises(ValidationError):
            approximate_entropy(np.ones(3), m=3)


class TestLagAutocorrelation:
    def test_lag_zero_is_one(self, rng):
        assert lag_autocorrelation(rng.standard_normal(50), 0) == 1.0

    def test_sine_at_period(self):
        t = np.arange(1000)
        x = np.sin(2 * np.pi * t / 100)
        assert lag_autocorrelation(x, 100) == pytest.approx(1.0, abs=1e-6)

    def test_matches_direct_pearson(self, rng):
        x = np.cumsum(rng.standard_normal(300))
        a, b = x[:-1], x[1:]
        want = (np.mean((a - a.mean()) * (b - b.mean()))
                / (a.std() * b.std()))
        assert lag_autocorrelation(x, 1) == pytest.approx(want, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(NumericDomainError):
            lag_autocorrelation(np.ones(50), 1)

    def test_too_short_rejected(self):
        with pytest.raises(ValidationError):
            lag_autocorrelation(np.ones(5), 10)
