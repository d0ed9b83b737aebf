"""Grid-series ingestion, synthetic generation, windowing, scaling, diagnostics.

File formats
------------
Long CSV: a preamble line ``# H=<int> W=<int> interval=<min> channel=<name>``,
a header ``t,row,col,value``, then one row per populated cell. Cells absent
from the file are zero (no recorded activity).

Dense binary: magic ``HGRD1``, then H, W, T_total, interval as 32-bit
little-endian unsigned ints, then all frames as 32-bit little-endian floats
in t-major, row-major order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from histm.errors import (NumericDomainError, ParseError, UsageError,
                          ValidationError)
from histm.numerics import RandomSource

_GRID_MAGIC = b"HGRD1"


@dataclass
class GridSeries:
    """Time-ordered stack of H x W traffic frames."""

    frames: np.ndarray          # [T_total, H, W] float32, values >= 0
    interval_minutes: int
    channel_name: str = "internet"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValidationError(
                f"series frames must be [T, H, W] with T >= 1, got {self.frames.shape}")
        if self.interval_minutes < 1:
            raise ValidationError("interval_minutes must be positive")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("series contains non-finite values")
        if np.any(self.frames < 0):
            raise ValidationError("traffic volumes must be non-negative")

    @property
    def t_total(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window geometry: T input steps, K x K neighborhood, stride."""

    window_len: int
    kernel_size: int
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError(
                f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.window_len < 1:
            raise ValidationError("window_len must be >= 1")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")

    @property
    def half(self) -> int:
        return (self.kernel_size - 1) // 2


@dataclass
class SampleWindow:
    """One instance: a T x K x K block of raw values plus the next center value."""

    input: np.ndarray           # [T, K, K], raw scale
    target: float               # raw series value at (t + T, i, j)
    origin: tuple[int, int, int]  # (t, i, j) of the center cell


@dataclass(frozen=True)
class ScalerParams:
    """Min-max bounds fit on training inputs and targets only."""

    min_v: float
    max_v: float

    def __post_init__(self):
        if not (self.max_v > self.min_v):
            raise NumericDomainError(
                f"degenerate scaling range: min={self.min_v}, max={self.max_v}")

    def to_dict(self) -> dict:
        return {"min_v": self.min_v, "max_v": self.max_v}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(float(d["min_v"]), float(d["max_v"]))


# ---------------------------------------------------------------------------
# File I/O


def _parse_preamble(line: str) -> tuple[int, int, int, str]:
    if not line.startswith("#"):
        raise ParseError("line 1: expected preamble '# H=<int> W=<int> "
                         "interval=<min> channel=<name>'")
    fields = dict(part.split("=", 1) for part in line[1:].split() if "=" in part)
    try:
        return (int(fields["H"]), int(fields["W"]), int(fields["interval"]),
                fields.get("channel", "internet"))
    except (KeyError, ValueError) as e:
        raise ParseError(f"line 1: bad preamble ({e})") from e


def load_long_csv(path) -> GridSeries:
    """Read a long-format CSV into a dense series; absent cells are zero."""
    with open(path, "r", newline="") as fh:
        return _load_long_csv_stream(fh)


def _load_long_csv_stream(fh) -> GridSeries:
    first = fh.readline().rstrip("\n")
    h, w, interval, channel = _parse_preamble(first)
    header = fh.readline().rstrip("\n")
    if header != "t,row,col,value":
        raise ParseError(f"line 2: expected header 't,row,col,value', got {header!r}")

    ts, rows, cols, vals = [], [], [], []
    reader = csv.reader(fh)
    for lineno, rec in enumerate(reader, start=3):
        if not rec:
            continue
        if len(rec) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(rec)}")
        try:
            t, r, c = int(rec[0]), int(rec[1]), int(rec[2])
            v = float(rec[3])
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from e
        if t < 0 or not (0 <= r < h) or not (0 <= c < w):
            raise ValidationError(
                f"line {lineno}: cell (t={t}, row={r}, col={c}) outside the "
                f"{h}x{w} grid")
        if v < 0:
            raise ValidationError(f"line {lineno}: negative value {v}")
        ts.append(t)
        rows.append(r)
        cols.append(c)
        vals.append(v)
    if not ts:
        raise ValidationError("no data rows in series file")

    t_arr = np.asarray(ts)
    keys = (t_arr.astype(np.int64) * h + np.asarray(rows)) * w + np.asarray(cols)
    if len(np.unique(keys)) != len(keys):
        raise ValidationError("duplicate (t,row,col) entries in series file")

    t_total = int(t_arr.max()) + 1
    frames = np.zeros((t_total, h, w), dtype=np.float32)
    frames[t_arr, rows, cols] = np.asarray(vals, dtype=np.float32)
    return GridSeries(frames, interval, channel)


def save_long_csv(series: GridSeries, path, sparse: bool = True) -> None:
    """Write the long CSV form; with ``sparse`` only nonzero cells are listed.

    Values are printed with 9 significant digits, enough to round-trip
    float32 exactly.
    """
    with open(path, "w", newline="") as fh:
        fh.write(f"# H={series.height} W={series.width} "
                 f"interval={series.interval_minutes} channel={series.channel_name}\n")
        fh.write("t,row,col,value\n")
        for t in range(series.t_total):
            frame = series.frames[t]
            if sparse:
                rr, cc = np.nonzero(frame)
            else:
                rr, cc = np.indices(frame.shape).reshape(2, -1)
            for r, c in zip(rr.tolist(), cc.tolist()):
                fh.write(f"{t},{r},{c},{frame[r, c]:.9g}\n")


def write_dense_grid(series: GridSeries, path) -> None:
    """Write the HGRD1 binary form."""
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<4I", series.height, series.width, series.t_total,
                             series.interval_minutes))
        fh.write(series.frames.astype("<f4").tobytes())


def read_dense_grid(path) -> GridSeries:
    """Read the HGRD1 binary form."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _GRID_MAGIC:
        raise ParseError(f"bad magic {blob[:5]!r}, expected {_GRID_MAGIC!r}")
    if len(blob) < 5 + 16:
        raise ParseError("truncated header")
    h, w, t_total, interval = struct.unpack("<4I", blob[5:21])
    expect = t_total * h * w * 4
    if len(blob) != 21 + expect:
        raise ParseError(
            f"payload is {len(blob) - 21} bytes, expected {expect}")
    frames = np.frombuffer(blob, dtype="<f4", offset=21).reshape(t_total, h, w)
    return GridSeries(frames.copy(), int(interval))


def load_series(path) -> GridSeries:
    """Dispatch on file content: HGRD1 binary or long CSV."""
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head == _GRID_MAGIC:
        return read_dense_grid(path)
    return load_long_csv(path)


# ---------------------------------------------------------------------------
# Synthetic data


def generate_synthetic(h: int, w: int, days: int, interval_minutes: int = 10,
                       seed: int = 0) -> GridSeries:
    """Deterministic stand-in traffic: diurnal cycles over a bumpy base map.

    Each cell follows base(i,j) * (1 + 0.8 sin(2 pi t / steps_per_day +
    phase(i,j))), with a few short localized bursts and non-negative noise
    added, clipped at zero. The base map is one central Gaussian bump plus
    several offset ones, echoing the center-heavy activity of real urban
    grids.
    """
    if h < 1 or w < 1 or days < 1 or interval_minutes < 1:
        raise ValidationError("synthetic dimensions must be positive")
    steps_per_day = max(1, (24 * 60) // interval_minutes)
    t_total = days * steps_per_day
    rng = RandomSource(seed)

    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)

    def bump(ci, cj, amp, sig):
        return amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sig ** 2))

    base = bump((h - 1) / 2.0, (w - 1) / 2.0, 100.0, max(h, w) / 4.0)
    brng = rng.derive(1)
    n_bumps = max(2, (h * w) // 120)
    for _ in range(n_bumps):
        ci = brng.uniform(0, h - 1, ())
        cj = brng.uniform(0, w - 1, ())
        amp = brng.uniform(15.0, 50.0, ())
        sig = brng.uniform(1.0, max(2.0, min(h, w) / 8.0), ())
        base += bump(float(ci), float(cj), float(amp), float(sig))

    phase = rng.derive(2).uniform(0.0, np.pi / 2.0, (h, w))
    t = np.arange(t_total, dtype=np.float64)
    diurnal = 1.0 + 0.8 * np.sin(2.0 * np.pi * t[:, None, None] / steps_per_day
                                 + phase[None, :, :])
    values = base[None, :, :] * diurnal

    urng = rng.derive(3)
    for _ in range(2 * days):
        ci = float(urng.uniform(1, h - 2, ()))
        cj = float(urng.uniform(1, w - 2, ()))
        t0 = int(urng.integers(0, t_total))
        dur = int(urng.integers(3, 13))
        amp = float(urng.uniform(0.5, 1.5, ())) * base[int(ci), int(cj)]
        t1 = min(t_total, t0 + dur)
        envelope = np.sin(np.pi * (np.arange(t1 - t0) + 0.5) / (t1 - t0))
        spot = bump(ci, cj, amp, 1.5)
        values[t0:t1] += envelope[:, None, None] * spot[None, :, :]

    # Per-cell noise scales with the local base, so single cells are far
    # more volatile than the grid aggregate (which averages it away).
    noise = rng.derive(4).uniform(0.0, 1.0, (t_total, h, w)) * (0.5 * base[None, :, :])
    values = np.clip(values + noise, 0.0, None)
    return GridSeries(values.astype(np.float32), interval_minutes, "synthetic")


# ---------------------------------------------------------------------------
# Windowing


def window_count(t_span: int, h: int, w: int, spec: WindowSpec) -> int:
    """Closed-form sample count for a span of t_span frames."""
    if t_span < spec.window_len + 1:
        return 0
    n_t = (t_span - spec.window_len - 1) // spec.stride + 1
    return n_t * (h - spec.kernel_size + 1) * (w - spec.kernel_size + 1)


def make_window_index(series: GridSeries, spec: WindowSpec,
                      t_range: tuple[int, int] | None = None) -> np.ndarray:
    """All (t, i, j) origins: start frame and center cell of each sample.

    Centers are cropped so the K x K block always fits inside the grid.
    Start times step by the stride from the range start and need frame
    t + T to exist inside the range (it is the target).
    """
    lo, hi = t_range if t_range is not None else (0, series.t_total)
    if not (0 <= lo < hi <= series.t_total):
        raise ValidationError(f"bad time range [{lo}, {hi}) for series of "
                              f"length {series.t_total}")
    span = hi - lo
    if span < spec.window_len + 1:
        raise ValidationError(
            f"range of {span} frames is too short for T={spec.window_len} "
            f"plus a target")
    if series.height < spec.kernel_size or series.width < spec.kernel_size:
        raise ValidationError(
            f"grid {series.height}x{series.width} smaller than kernel "
            f"{spec.kernel_size}")
    r = spec.half
    starts = np.arange(lo, hi - spec.window_len, spec.stride, dtype=np.int64)
    rows = np.arange(r, series.height - r, dtype=np.int64)
    cols = np.arange(r, series.width - r, dtype=np.int64)
    tt, rr, cc = np.meshgrid(starts, rows, cols, indexing="ij")
    return np.stack([tt.ravel(), rr.ravel(), cc.ravel()], axis=1)


def materialize_sample(series: GridSeries, t: int, i: int, j: int,
                       spec: WindowSpec) -> SampleWindow:
    """Slice one raw sample block and its target out of the series."""
    r = spec.half
    if not (0 <= t and t + spec.window_len < series.t_total):
        raise UsageError(f"window start {t} out of range")
    if not (r <= i < series.height - r and r <= j < series.width - r):
        raise UsageError(f"center ({i}, {j}) violates the crop bounds")
    block = series.frames[t:t + spec.window_len, i - r:i + r + 1, j - r:j + r + 1]
    target = float(series.frames[t + spec.window_len, i, j])
    return SampleWindow(np.array(block, dtype=np.float64), target, (t, i, j))


def chronological_split(t_total: int, fractions=(0.7, 0.15, 0.15),
                        min_len: int | None = None) -> list[tuple[int, int]]:
    """Contiguous, ordered, non-overlapping time ranges covering [0, t_total).

    Boundaries fall at floor(cumulative fraction * t_total). Windows are
    built within each range independently, so nothing straddles a boundary
    and no training target can reach validation time.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {fractions}")
    bounds = [0]
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        bounds.append(int(np.floor(acc * t_total)))
    bounds.append(t_total)
    ranges = list(zip(bounds[:-1], bounds[1:]))
    if min_len is not None:
        for k, (a, b) in enumerate(ranges):
            if b - a < min_len:
                raise ValidationError(
                    f"split {k} covers {b - a} frames, fewer than the "
                    f"required {min_len}")
    return ranges


# ---------------------------------------------------------------------------
# Scaling


def scaler_fit(series: GridSeries, index: np.ndarray, spec: WindowSpec) -> ScalerParams:
    """Min/max over exactly the values the training samples contain.

    Inputs cover whole frames spatially (the cropped centers sweep every
    cell of the K x K unions), so the bounds reduce to the covered input
    frames plus the cropped target frames.
    """
    if len(index) == 0:
        raise ValidationError("cannot fit a scaler on an empty sample index")
    starts = np.unique(index[:, 0])
    input_times = np.unique((starts[:, None]
                             + np.arange(spec.window_len)[None, :]).ravel())
    target_times = np.unique(starts + spec.window_len)
    r = spec.half
    inp = series.frames[input_times]
    tgt = series.frames[target_times][:, r:series.height - r, r:series.width - r]
    lo = min(float(inp.min()), float(tgt.min()))
    hi = max(float(inp.max()), float(tgt.max()))
    return ScalerParams(lo, hi)


def scaler_apply(x, p: ScalerParams):
    """Map to [0, 1]; out-of-range values clip to the bounds."""
    scaled = (np.asarray(x, dtype=np.float64) - p.min_v) / (p.max_v - p.min_v)
    return np.clip(scaled, 0.0, 1.0)


def scaler_invert(x, p: ScalerParams):
    """Back to the original scale (exact for values that were in range)."""
    return np.asarray(x, dtype=np.float64) * (p.max_v - p.min_v) + p.min_v


# ---------------------------------------------------------------------------
# Sample sets (normalized, ready for the model)


@dataclass
class SampleSet:
    """A window index over normalized frames, gatherable in batches."""

    frames: np.ndarray          # [T_total, H, W] normalized, model dtype
    index: np.ndarray           # [n, 3] (t, i, j)
    spec: WindowSpec
    scaler: ScalerParams

    def __len__(self) -> int:
        return len(self.index)

    def gather(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Materialize (inputs [B, T, K, K], targets [B]) for index rows."""
        spec = self.spec
        r = spec.half
        xs = np.empty((len(rows), spec.window_len, spec.kernel_size,
                       spec.kernel_size), dtype=self.frames.dtype)
        ys = np.empty(len(rows), dtype=self.frames.dtype)
        for b, row in enumerate(rows):
            t, i, j = self.index[row]
            xs[b] = self.frames[t:t + spec.window_len,
                                i - r:i + r + 1, j - r:j + r + 1]
            ys[b] = self.frames[t + spec.window_len, i, j]
        return xs, ys

    def targets(self) -> np.ndarray:
        t = self.index[:, 0] + self.spec.window_len
        return self.frames[t, self.index[:, 1], self.index[:, 2]]


def build_sample_set(series: GridSeries, t_range: tuple[int, int],
                     spec: WindowSpec, scaler: ScalerParams,
                     dtype=np.float32) -> SampleSet:
    """Normalize the series with the training scaler and index one range."""
    index = make_window_index(series, spec, t_range)
    frames = scaler_apply(series.frames, scaler).astype(dtype)
    return SampleSet(frames, index, spec, scaler)


# ---------------------------------------------------------------------------
# Series diagnostics


def approximate_entropy(series, m: int = 2, r: float | None = None) -> float:
    """Regularity statistic ApEn(m, r): Phi_m - Phi_{m+1}.

    Chebyshev distance, self-matches included. By default r is 0.2 times
    the series standard deviation. Lower values mean a more predictable
    series; a constant series scores exactly 0.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if len(x) <= m + 1:
        raise ValidationError(
            f"series of length {len(x)} too short for ApEn with m={m}")
    if r is None:
        r = 0.2 * float(np.std(x))
        if r == 0.0:
            return 0.0  # constant series: every template matches every other
    if r <= 0:
        raise ValidationError(f"tolerance r must be positive, got {r}")

    def phi(mm: int) -> float:
        templates = sliding_window_view(x, mm)
        n = len(templates)
        counts = np.empty(n)
        for i in range(n):
            dist = np.abs(templates - templates[i]).max(axis=1)
            counts[i] = np.count_nonzero(dist <= r)
        return float(np.mean(np.log(counts / n)))

    return phi(m) - phi(m + 1)


def lag_autocorrelation(series, lag: int) -> float:
    """Pearson correlation of (x_t, x_{t+lag}); lag 0 is exactly 1."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if lag < 0:
        raise ValidationError(f"lag must be >= 0, got {lag}")
    if len(x) <= lag + 1:
        raise ValidationError(f"series of length {len(x)} too short for lag {lag}")
    if lag == 0:
        if np.var(x) == 0:
            raise NumericDomainError("autocorrelation of a constant series "
                                     "is undefined")
        return 1.0
    a, b = x[:-lag], x[lag:]
    if np.var(a) == 0 or np.var(b) == 0:
        raise NumericDomainError("autocorrelation undefined: zero variance segment")
    return float(np.corrcoef(a, b)[0, 1])
