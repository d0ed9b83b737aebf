"""Metrics, single-step evaluation, rollout, and cell profiling."""

import numpy as np
import pytest

from histm.data import (ScalerParams, WindowSpec, build_sample_set,
                        chronological_split, generate_synthetic,
                        make_window_index, scaler_apply, scaler_fit,
                        scaler_invert)
from histm.errors import NumericDomainError, ValidationError
from histm.evaluation import (BlockMeanPredictor, MetricsReport,
                              PersistencePredictor, RolloutConfig,
                              autoregressive_rollout, cell_profile,
                              evaluate_single_step, gaussian_window, mae, mape,
                              r2, rmse, rollout_to_csv, ssim)


class TestScalarMetrics:
    def test_mae_rmse_example(self):
        pred, truth = np.array([3.0, 1.0]), np.array([1.0, 1.0])
        assert mae(pred, truth) == 1.0
        assert rmse(pred, truth) == pytest.approx(np.sqrt(2.0), abs=1e-12)

    def test_perfect_prediction(self, rng):
        x = rng.standard_normal(50)
        assert mae(x, x) == 0.0 and rmse(x, x) == 0.0

    def test_against_direct_loops(self, rng):
        pred = rng.standard_normal(1000)
        truth = rng.standard_normal(1000)
        e = pred - truth
        assert mae(pred, truth) == pytest.approx(np.abs(e).mean(), abs=1e-12)
        assert rmse(pred, truth) == pytest.approx(np.sqrt((e ** 2).mean()),
                                                  abs=1e-12)

    def test_rmse_at_least_mae_fuzz(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 200))
            pred = rng.standard_normal(n) * rng.uniform(0.1, 10)
            truth = rng.standard_normal(n)
            assert rmse(pred, truth) >= mae(pred, truth) - 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            mae(np.zeros(0), np.zeros(0))


class TestR2:
    def test_perfect_is_one(self, rng):
        x = rng.standard_normal(40)
        assert r2(x, x) == 1.0

    def test_mean_predictor_is_zero(self, rng):
        truth = rng.standard_normal(40)
        pred = np.full(40, truth.mean())
        assert r2(pred, truth) == pytest.approx(0.0, abs=1e-12)

    def test_against_formula(self, rng):
        pred = rng.standard_normal(64)
        truth = rng.standard_normal(64)
        want = 1.0 - np.sum((truth - pred) ** 2) / np.sum(
            (truth - truth.mean()) ** 2)
        assert r2(pred, truth) == pytest.approx(want, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(NumericDomainError):
            r2(np.array([1.0, 2.0]), np.array([3.0, 3.0]))


class TestMape:
    def test_ten_percent(self):
        assert mape(np.array([110.0]), np.array([100.0])) == pytest.approx(10.0)

    def test_zero_for_exact(self, rng):
        x = rng.uniform(1, 9, 20)
        assert mape(x, x) == 0.0

    def test_floor_guards_zero_truth(self):
        assert mape(np.array([0.5]), np.array([0.0]), floor=1.0) == 50.0

    def test_bad_floor_rejected(self):
        with pytest.raises(ValidationError):
            mape(np.ones(3), np.ones(3), floor=0.0)


class TestSsim:
    def test_identical_frames_score_one(self, rng):
        a = rng.uniform(0, 9, (16, 16))
        assert ssim(a, a, dynamic_range=9.0) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 9, (14, 15))
        b = rng.uniform(0, 9, (14, 15))
        assert ssim(a, b, 9.0) == pytest.approx(ssim(b, a, 9.0), abs=1e-12)

    def test_against_direct_sliding_window(self, rng):
        a = rng.uniform(0, 5, (13, 13))
        b = a + rng.standard_normal((13, 13)) * 0.4
        win, sig = 11, 1.5
        g = gaussian_window(win, sig)
        scores = []
        for i in range(13 - win + 1):
            for j in range(13 - win + 1):
                pa = a[i:i + win, j:j + win]
                pb = b[i:i + win, j:j + win]
                mu_a = (g * pa).sum()
                mu_b = (g * pb).sum()
                va = (g * pa * pa).sum() - mu_a ** 2
                vb = (g * pb * pb).sum() - mu_b ** 2
                cov = (g * pa * pb).sum() - mu_a * mu_b
                c1, c2 = (0.01 * 5.0) ** 2, (0.03 * 5.0) ** 2
                scores.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                              / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
        assert ssim(a, b, 5.0) == pytest.approx(np.mean(scores), abs=1e-9)

    def test_small_frame_rejected(self, rng):
        with pytest.raises(ValidationError):
            ssim(np.zeros((5, 5)), np.zeros((5, 5)), 1.0)

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValidationError):
            ssim(np.zeros((12, 12)), np.zeros((12, 13)), 1.0)

    def test_degraded_frame_scores_below_one(self, rng):
        a = rng.uniform(0, 9, (20, 20))
        noisy = a + rng.standard_normal((20, 20)) * 2.0
        assert ssim(a, noisy, 9.0) < 0.99


class TestMetricsReport:
    def test_invariants_enforced(self):
        with pytest.raises(ValidationError):
            MetricsReport(mae=2.0, rmse=1.0, r2=0.5, ssim=0.9, mape=1.0,
                          n_predictions=10)
        with pytest.raises(ValidationError):
            MetricsReport(mae=1.0, rmse=2.0, r2=1.5, ssim=0.9, mape=1.0,
                          n_predictions=10)
        with pytest.raises(ValidationError):
            MetricsReport(mae=1.0, rmse=2.0, r2=0.5, ssim=-1.5, mape=1.0,
                          n_predictions=10)

    def test_csv_shape(self):
        rep = MetricsReport(1.0, 2.0, 0.5, 0.9, 8.0, 10)
        lines = rep.to_csv().strip().split("\n")
        assert lines[0] == "metric,value"
        assert len(lines) == 7


def constant_in_time_setup(k=5, h=12, w=12, t_total=40, t_len=4):
    """A series constant over time: persistence predicts it exactly."""
    rng = np.random.default_rng(8)
    frame = rng.uniform(10.0, 90.0, (h, w)).astype(np.float32)
    frames = np.tile(frame, (t_total, 1, 1))
    from histm.data import GridSeries
    series = GridSeries(frames, 10)
    spec = WindowSpec(t_len, k, 1)
    scaler = ScalerParams(0.0, 100.0)
    return series, spec, scaler


class TestEvaluateSingleStep:
    def test_exact_predictor_perfect_scores(self):
        series, spec, scaler = constant_in_time_setup()
        sample_set = build_sample_set(series, (0, 40), spec, scaler)
        rep = evaluate_single_step(PersistencePredictor(), sample_set,
                                   ssim_window=7)
        assert rep.mae == pytest.approx(0.0, abs=1e-5)
        assert rep.ssim == pytest.approx(1.0, abs=1e-6)
        assert rep.r2 == pytest.approx(1.0, abs=1e-9)

    def test_constant_output_model_nonpositive_r2(self):
        series = generate_synthetic(12, 12, 2, 10, seed=2)
        spec = WindowSpec(4, 5, 1)
        idx = make_window_index(series, spec, (0, 200))
        scaler = scaler_fit(series, idx, spec)
        sample_set = build_sample_set(series, (0, 200), spec, scaler)

        class Constant:
            scaler = None

            def predict_batch(self, x):
                return np.full(len(x), 0.123)

        rep = evaluate_single_step(Constant(), sample_set, ssim_window=7)
        assert rep.r2 <= 0.0

    def test_persistence_matches_hand_enumeration(self):
        # 3-frame toy series, hand-computed persistence MAE
        from histm.data import GridSeries
        frames = np.zeros((4, 3, 3), dtype=np.float32)
        frames[0] = 1.0
        frames[1] = 3.0
        frames[2] = 6.0
        frames[3] = 10.0
        series = GridSeries(frames, 10)
        spec = WindowSpec(2, 1, 1)
        scaler = ScalerParams(0.0, 10.0)
        sample_set = build_sample_set(series, (0, 4), spec, scaler)
        # windows: [f0,f1]->f2 and [f1,f2]->f3; persistence errors 3 and 4
        rep = evaluate_single_step(PersistencePredictor(), sample_set,
                                   ssim_window=3)
        assert rep.mae == pytest.approx(3.5, abs=1e-6)

    def test_scaler_mismatch_rejected(self):
        series, spec, scaler = constant_in_time_setup()
        sample_set = build_sample_set(series, (0, 40), spec, scaler)

        class WrongScaler:
            scaler = ScalerParams(0.0, 50.0)

            def predict_batch(self, x):
                return np.zeros(len(x))

        with pytest.raises(ValidationError, match="scaler"):
            evaluate_single_step(WrongScaler(), sample_set)

    def test_denormalized_equals_scaled_normalized_mae(self):
        series = generate_synthetic(10, 10, 2, 10, seed=5)
        spec = WindowSpec(3, 3, 3)
        idx = make_window_index(series, spec, (0, 150))
        scaler = scaler_fit(series, idx, spec)
        sample_set = build_sample_set(series, (0, 150), spec, scaler)
        predictor = BlockMeanPredictor()
        rep = evaluate_single_step(predictor, sample_set, ssim_window=5)
        # recompute in normalized units and scale the error back up
        preds, truths = [], []
        for start in range(0, len(sample_set), 512):
            rows = np.arange(start, min(start + 512, len(sample_set)))
            xs, ys = sample_set.gather(rows)
            preds.append(predictor.predict_batch(xs))
            truths.append(ys)
        pn = np.concatenate(preds)
        tn = np.concatenate(truths)
        norm_mae = np.abs(pn - tn).mean()
        assert rep.mae == pytest.approx(
            norm_mae * (scaler.max_v - scaler.min_v), rel=1e-9)


class TestRollout:
    def test_oracle_model_zero_error_every_step(self):
        series, spec, scaler = constant_in_time_setup()
        cfg = RolloutConfig(steps=4)
        steps = autoregressive_rollout(PersistencePredictor(), series, 0, spec,
                                       scaler, cfg, ssim_window=7)
        assert len(steps) == 4
        for s in steps:
            assert s.mae == pytest.approx(0.0, abs=1e-5)

    def test_single_step_equals_single_step_eval(self):
        series = generate_synthetic(12, 12, 2, 10, seed=3)
        spec = WindowSpec(4, 5, 1)
        idx = make_window_index(series, spec, (0, series.t_total))
        scaler = scaler_fit(series, idx, spec)
        predictor = BlockMeanPredictor()
        start_t = 10
        steps = autoregressive_rollout(predictor, series, start_t, spec, scaler,
                                       RolloutConfig(steps=1), ssim_window=7)
        sample_set = build_sample_set(series, (0, series.t_total), spec, scaler)
        mask = sample_set.index[:, 0] == start_t
        sample_set.index = sample_set.index[mask]
        rep = evaluate_single_step(predictor, sample_set, ssim_window=7)
        assert steps[0].mae == pytest.approx(rep.mae, abs=1e-12)
        assert steps[0].rmse == pytest.approx(rep.rmse, abs=1e-12)
        assert steps[0].ssim == pytest.approx(rep.ssim, abs=1e-12)

    def test_persistence_error_grows_with_horizon_on_diurnal_data(self):
        series = generate_synthetic(12, 12, 3, 10, seed=6)
        spec = WindowSpec(6, 5, 1)
        idx = make_window_index(series, spec, (0, series.t_total))
        scaler = scaler_fit(series, idx, spec)
        per_step = np.zeros(6)
        starts = (0, 30, 100, 200, 300)
        for start in starts:
            steps = autoregressive_rollout(PersistencePredictor(), series,
                                           start, spec, scaler,
                                           RolloutConfig(steps=6),
                                           ssim_window=7)
            per_step += [s.mae for s in steps]
        per_step /= len(starts)
        assert np.isfinite(per_step).all()
        # frame-level noise hides the drift at any one start; averaged over
        # starts, a frozen forecast must fall behind the diurnal cycle
        assert per_step[3:].mean() > per_step[:3].mean()

    def test_boundary_modes_differ_only_outside_inner_region(self):
        series = generate_synthetic(12, 12, 2, 10, seed=9)
        spec = WindowSpec(4, 5, 1)
        idx = make_window_index(series, spec, (0, series.t_total))
        scaler = scaler_fit(series, idx, spec)
        hold = autoregressive_rollout(PersistencePredictor(), series, 5, spec,
                                      scaler, RolloutConfig(2, "hold_last"),
                                      ssim_window=7)
        true = autoregressive_rollout(PersistencePredictor(), series, 5, spec,
                                      scaler, RolloutConfig(2, "true_values"),
                                      ssim_window=7)
        # step 1 reads only true history, so it must agree exactly
        assert hold[0].mae == pytest.approx(true[0].mae, abs=1e-12)

    def test_insufficient_series_rejected(self):
        series, spec, scaler = constant_in_time_setup(t_total=10, t_len=4)
        with pytest.raises(ValidationError):
            autoregressive_rollout(PersistencePredictor(), series, 5, spec,
                                   scaler, RolloutConfig(steps=6))

    def test_csv_shape(self):
        series, spec, scaler = constant_in_time_setup()
        steps = autoregressive_rollout(PersistencePredictor(), series, 0, spec,
                                       scaler, RolloutConfig(steps=3),
                                       ssim_window=7)
        lines = rollout_to_csv(steps).strip().split("\n")
        assert lines[0] == "step,mae,rmse,ssim"
        assert len(lines) == 4


class TestCellProfile:
    def test_oracle_zero_mape(self):
        series, spec, scaler = constant_in_time_setup()
        rows, cell_mape = cell_profile(PersistencePredictor(), series, (6, 6),
                                       (0, 40), spec, scaler)
        assert cell_mape == pytest.approx(0.0, abs=1e-4)
        assert len(rows) == 40 - spec.window_len

    def test_persistence_matches_hand_rollout(self):
        from histm.data import GridSeries
        rng = np.random.default_rng(3)
        frames = rng.uniform(5, 50, (14, 5, 5)).astype(np.float32)
        series = GridSeries(frames, 10)
        spec = WindowSpec(3, 3, 1)
        scaler = ScalerParams(0.0, 60.0)
        rows, _ = cell_profile(PersistencePredictor(), series, (2, 2), (0, 13),
                               spec, scaler)
        assert len(rows) == 10
        for t, truth, pred in rows:
            assert truth == pytest.approx(float(frames[t, 2, 2]), abs=1e-4)
            # persistence repeats the value one step earlier (denormalized)
            want = scaler_invert(scaler_apply(frames[t - 1, 2, 2], scaler), scaler)
            assert pred == pytest.approx(float(want), abs=1e-4)

    def test_boundary_cell_rejected(self):
        series, spec, scaler = constant_in_time_setup()
        with pytest.raises(ValidationError, match="crop"):
            cell_profile(PersistencePredictor(), series, (0, 0), (0, 40), spec,
                         scaler)

    def test_week_long_count(self):
        # 7 days at 10-minute bins: 1008 steps; stride-1 profiling of a range
        # of 1008+T frames yields exactly 1008 predictions
        series = generate_synthetic(9, 9, 8, 10, seed=1)
        spec = WindowSpec(6, 5, 1)
        scaler = ScalerParams(0.0, float(series.frames.max()))
        rows, _ = cell_profile(PersistencePredictor(), series, (4, 4),
                               (0, 1008 + 6), spec, scaler)
        assert len(rows) == 1008
