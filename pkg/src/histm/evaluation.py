"""Metric suite and evaluation protocols on the original (denormalized) scale.

Predictors expose ``predict_batch(x) -> [B]`` over normalized [B, T, K, K]
windows. The HiSTM checkpoint predictor, the persistence baseline (repeat
the last center value), and the block-mean baseline all run through the
same evaluation paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from histm.data import (GridSeries, SampleSet, ScalerParams, WindowSpec,
                        scaler_apply, scaler_invert)
from histm.errors import NumericDomainError, ValidationError
from histm.model import HiSTMConfig, HiSTMParams, predict_batch

_SLACK = 1e-9


@dataclass
class MetricsReport:
    """Scores over one prediction set, in original units."""

    mae: float
    rmse: float
    r2: float
    ssim: float
    mape: float
    n_predictions: int
    per_step: list = field(default_factory=list)

    def __post_init__(self):
        values = [self.mae, self.rmse, self.r2, self.ssim, self.mape]
        if not all(np.isfinite(v) for v in values):
            raise ValidationError(f"non-finite metric in report: {values}")
        if self.rmse < self.mae - _SLACK or self.mae < -_SLACK:
            raise ValidationError(f"rmse {self.rmse} < mae {self.mae}")
        if self.r2 > 1.0 + _SLACK:
            raise ValidationError(f"r2 {self.r2} > 1")
        if not (-1.0 - _SLACK <= self.ssim <= 1.0 + _SLACK):
            raise ValidationError(f"ssim {self.ssim} outside [-1, 1]")

    def to_dict(self) -> dict:
        d = {"mae": self.mae, "rmse": self.rmse, "r2": self.r2,
             "ssim": self.ssim, "mape": self.mape,
             "n_predictions": self.n_predictions}
        if self.per_step:
            d["per_step"] = [s.to_dict() for s in self.per_step]
        return d

    def to_csv(self) -> str:
        lines = ["metric,value",
                 f"mae,{self.mae:.10g}",
                 f"rmse,{self.rmse:.10g}",
                 f"r2,{self.r2:.10g}",
                 f"ssim,{self.ssim:.10g}",
                 f"mape,{self.mape:.10g}",
                 f"n_predictions,{self.n_predictions}"]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RolloutConfig:
    """Autoregressive forecast settings.

    boundary_fill chooses what feeds the uncropped ring of rolled frames:
    ``hold_last`` freezes the last observed values (self-contained
    recursion), ``true_values`` copies the real frames (ablation mode).
    """

    steps: int = 6
    boundary_fill: str = "hold_last"

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("rollout needs steps >= 1")
        if self.boundary_fill not in ("hold_last", "true_values"):
            raise ValidationError(
                f"unknown boundary_fill {self.boundary_fill!r}")


# ---------------------------------------------------------------------------
# Metrics


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValidationError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValidationError("empty prediction set")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.sqrt(np.mean(np.square(pred - truth))))


def r2(pred, truth) -> float:
    """1 - residual/total variance; the mean predictor scores exactly 0."""
    pred, truth = _check_pair(pred, truth)
    total = float(np.sum(np.square(truth - truth.mean())))
    if total == 0.0:
        raise NumericDomainError("R^2 undefined: truth has zero variance")
    return 1.0 - float(np.sum(np.square(truth - pred))) / total


def mape(pred, truth, floor: float = 1.0) -> float:
    """Mean absolute percentage error with a denominator floor.

    The floor keeps near-zero truth values (sparse rural cells) from
    blowing the percentage up to infinity.
    """
    if floor <= 0:
        raise ValidationError(f"mape floor must be positive, got {floor}")
    pred, truth = _check_pair(pred, truth)
    denom = np.maximum(np.abs(truth), floor)
    return float(100.0 * np.mean(np.abs(pred - truth) / denom))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2-D Gaussian tap matrix."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-np.square(ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred_frame, truth_frame, dynamic_range: float, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local structural similarity over valid window positions.

    Gaussian-weighted 11x11 local statistics with stability constants
    C1=(k1*L)^2, C2=(k2*L)^2 where L is the dynamic range (train max-min).
    Symmetric in its arguments; identical frames score exactly 1.
    """
    a = np.asarray(pred_frame, dtype=np.float64)
    b = np.asarray(truth_frame, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValidationError(f"SSIM needs equal 2-D frames, got {a.shape} "
                              f"and {b.shape}")
    if min(a.shape) < window:
        raise ValidationError(
            f"frame {a.shape} smaller than the {window}x{window} window")
    if dynamic_range <= 0:
        raise ValidationError("dynamic_range must be positive")
    w = gaussian_window(window, sigma)

    def local_mean(img):
        patches = sliding_window_view(img, (window, window))
        return np.tensordot(patches, w, axes=([2, 3], [0, 1]))

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    aa = local_mean(a * a) - mu_a * mu_a
    bb = local_mean(b * b) - mu_b * mu_b
    ab = local_mean(a * b) - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Predictors


class HiSTMPredictor:
    """Checkpoint-backed model predictor (normalized in, normalized out)."""

    def __init__(self, params: HiSTMParams, config: HiSTMConfig,
                 scaler: ScalerParams | None = None):
        self.params = params
        self.config = config
        self.scaler = scaler

    @classmethod
    def from_checkpoint(cls, ckpt, dtype=np.float32) -> "HiSTMPredictor":
        return cls(ckpt.to_params(dtype), ckpt.config, ckpt.scaler)

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        return predict_batch(x, self.params, self.config).data.astype(np.float64)


class PersistencePredictor:
    """Repeats the center value of the most recent frame."""

    scaler = None

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        k = x.shape[-1]
        c = (k - 1) // 2
        return np.asarray(x[:, -1, c, c], dtype=np.float64)


class BlockMeanPredictor:
    """Predicts the spatial mean of the most recent K x K frame."""

    scaler = None

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x[:, -1].mean(axis=(1, 2)), dtype=np.float64)


def _predict_all(predictor, sample_set: SampleSet, batch_size: int) -> np.ndarray:
    n = len(sample_set)
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        rows = np.arange(start, min(start + batch_size, n))
        xs, _ = sample_set.gather(rows)
        out[rows] = predictor.predict_batch(xs)
    return out


# ---------------------------------------------------------------------------
# Protocols


def evaluate_single_step(predictor, sample_set: SampleSet, batch_size: int = 512,
                         ssim_window: int = 11, mape_floor: float = 1.0) -> MetricsReport:
    """One-step-ahead evaluation; metrics on the denormalized scale.

    SSIM compares reassembled predicted inner frames against the truth,
    one per distinct target time, averaged unweighted.
    """
    ps = getattr(predictor, "scaler", None)
    if ps is not None and ps != sample_set.scaler:
        raise ValidationError(
            "predictor and sample set were built with different scalers")
    scaler = sample_set.scaler
    preds_n = _predict_all(predictor, sample_set, batch_size)
    truth_n = sample_set.targets()
    preds = scaler_invert(preds_n, scaler)
    truth = scaler_invert(truth_n, scaler)

    ssim_val = _frame_ssim(sample_set, preds, truth, ssim_window)
    return MetricsReport(
        mae=mae(preds, truth),
        rmse=rmse(preds, truth),
        r2=r2(preds, truth),
        ssim=ssim_val,
        mape=mape(preds, truth, mape_floor),
        n_predictions=len(preds),
    )


def _frame_ssim(sample_set: SampleSet, preds, truth, window: int) -> float:
    """Average SSIM over per-target-time inner frames."""
    index = sample_set.index
    spec = sample_set.spec
    scaler = sample_set.scaler
    dyn = scaler.max_v - scaler.min_v
    r = spec.half
    h = sample_set.frames.shape[1]
    w = sample_set.frames.shape[2]
    rows = h - 2 * r
    cols = w - 2 * r
    times = np.unique(index[:, 0])
    scores = []
    for t in times:
        mask = index[:, 0] == t
        if int(mask.sum()) != rows * cols:
            continue  # partial frame (filtered index): SSIM needs the full grid
        sel = index[mask]
        order = np.lexsort((sel[:, 2], sel[:, 1]))
        p_frame = preds[mask][order].reshape(rows, cols)
        t_frame = truth[mask][order].reshape(rows, cols)
        scores.append(ssim(p_frame, t_frame, dyn, window))
    if not scores:
        raise ValidationError(
            "no complete inner frame to score SSIM on (index incomplete "
            "or grid smaller than the window)")
    return float(np.mean(scores))


@dataclass
class StepMetrics:
    step: int
    mae: float
    rmse: float
    ssim: float
    r2: float
    mape: float

    def to_dict(self) -> dict:
        return {"step": self.step, "mae": self.mae, "rmse": self.rmse,
                "ssim": self.ssim, "r2": self.r2, "mape": self.mape}


def autoregressive_rollout(predictor, series: GridSeries, start_t: int,
                           spec: WindowSpec, scaler: ScalerParams,
                           cfg: RolloutConfig, batch_size: int = 512,
                           ssim_window: int = 11,
                           mape_floor: float = 1.0) -> list[StepMetrics]:
    """Multi-step forecast feeding predictions back as history.

    Step s predicts frame start_t+T+s-1 for every inner (cropped) cell
    from the working series, writes the predicted inner frame back, and
    handles the boundary ring per the config. Metrics per step cover the
    inner region only, denormalized.
    """
    t0 = start_t
    T = spec.window_len
    need = t0 + T + cfg.steps
    if t0 < 0 or need > series.t_total:
        raise ValidationError(
            f"rollout needs frames [{t0}, {need}) but series has "
            f"{series.t_total}")
    ps = getattr(predictor, "scaler", None)
    if ps is not None and ps != scaler:
        raise ValidationError(
            "predictor and rollout were built with different scalers")
    r = spec.half
    h, w = series.height, series.width
    if h < spec.kernel_size or w < spec.kernel_size:
        raise ValidationError("grid smaller than the kernel")
    frames_n = scaler_apply(series.frames[t0:need], scaler).astype(np.float32)
    work = frames_n.copy()
    dyn = scaler.max_v - scaler.min_v

    rows = np.arange(r, h - r)
    cols = np.arange(r, w - r)
    rr, cc = [g.ravel() for g in np.meshgrid(rows, cols, indexing="ij")]
    n_cells = len(rr)

    results = []
    for step in range(1, cfg.steps + 1):
        f = T + step - 1            # frame index (within work) being predicted
        preds_n = np.empty(n_cells, dtype=np.float64)
        for start in range(0, n_cells, batch_size):
            end = min(start + batch_size, n_cells)
            xs = np.empty((end - start, T, spec.kernel_size, spec.kernel_size),
                          dtype=work.dtype)
            for b, cell in enumerate(range(start, end)):
                i, j = rr[cell], cc[cell]
                xs[b] = work[f - T:f, i - r:i + r + 1, j - r:j + r + 1]
            preds_n[start:end] = predictor.predict_batch(xs)

        if cfg.boundary_fill == "hold_last":
            work[f] = work[T - 1]   # freeze the last observed frame's ring
        else:
            work[f] = frames_n[f]
        work[f, r:h - r, r:w - r] = preds_n.reshape(h - 2 * r, w - 2 * r)

        truth = scaler_invert(frames_n[f, r:h - r, r:w - r].astype(np.float64),
                              scaler)
        pred = scaler_invert(preds_n, scaler).reshape(h - 2 * r, w - 2 * r)
        results.append(StepMetrics(
            step=step,
            mae=mae(pred, truth),
            rmse=rmse(pred, truth),
            ssim=ssim(pred, truth, dyn, ssim_window),
            r2=r2(pred, truth),
            mape=mape(pred, truth, mape_floor),
        ))
    return results


def rollout_to_csv(steps: list[StepMetrics]) -> str:
    lines = ["step,mae,rmse,ssim"]
    for s in steps:
        lines.append(f"{s.step},{s.mae:.10g},{s.rmse:.10g},{s.ssim:.10g}")
    return "\n".join(lines) + "\n"


def trajectory_to_csv(rows) -> str:
    """Plot-ready export of (target time, truth, prediction) triples."""
    lines = ["t,truth,pred"]
    for t, truth, pred in rows:
        lines.append(f"{t},{truth:.10g},{pred:.10g}")
    return "\n".join(lines) + "\n"


def cell_profile(predictor, series: GridSeries, cell: tuple[int, int],
                 t_range: tuple[int, int], spec: WindowSpec,
                 scaler: ScalerParams, batch_size: int = 512,
                 mape_floor: float = 1.0):
    """Stride-1 single-step forecasts for one cell over a time range.

    Returns (rows, cell_mape) where rows are (target_t, truth, prediction)
    in original units, one per forecastable step in the range.
    """
    i, j = cell
    r = spec.half
    if not (r <= i < series.height - r and r <= j < series.width - r):
        raise ValidationError(
            f"cell ({i}, {j}) violates the crop bounds: rows and cols must "
            f"lie in [{r}, {series.height - r}) x [{r}, {series.width - r})")
    lo, hi = t_range
    if hi - lo < spec.window_len + 1:
        raise ValidationError("profiling range shorter than one window + target")
    ps = getattr(predictor, "scaler", None)
    if ps is not None and ps != scaler:
        raise ValidationError(
            "predictor and profile were built with different scalers")
    frames_n = scaler_apply(series.frames, scaler).astype(np.float32)
    starts = np.arange(lo, hi - spec.window_len)
    preds_n = np.empty(len(starts), dtype=np.float64)
    for s0 in range(0, len(starts), batch_size):
        sel = starts[s0:s0 + batch_size]
        xs = np.stack([frames_n[t:t + spec.window_len,
                                i - r:i + r + 1, j - r:j + r + 1] for t in sel])
        preds_n[s0:s0 + len(sel)] = predictor.predict_batch(xs)
    target_t = starts + spec.window_len
    truth = series.frames[target_t, i, j].astype(np.float64)
    preds = scaler_invert(preds_n, scaler)
    rows = [(int(t), float(tr), float(p))
            for t, tr, p in zip(target_t, truth, preds)]
    return rows, mape(preds, truth, mape_floor)
