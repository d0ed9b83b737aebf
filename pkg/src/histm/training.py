"""MAE training loop: Adam, plateau LR scheduling, early stopping, checkpoints.

Checkpoint format (``HSTM1``): the 5 magic bytes, a little-endian uint32
header length, a UTF-8 JSON header (version, model config, scaler, tensor
manifest with name/shape/offset, metadata), then the raw tensor data as
32-bit little-endian floats at the manifest offsets.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from histm.data import SampleSet, ScalerParams
from histm.errors import (CheckpointMagicError, CheckpointShapeError,
                          CheckpointTruncatedError, DivergenceError, UsageError,
                          ValidationError)
from histm.model import (HiSTMConfig, HiSTMParams, init_histm_params, param_shapes,
                         predict_batch)
from histm.numerics import (GradTape, RandomSource, Tensor, backward, finite_checks,
                            mean_abs_error)

CHECKPOINT_MAGIC = b"HSTM1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization regimen. Defaults follow the reference protocol:
    batch 128, up to 40 epochs, Adam at 1e-4, plateau halving after 7
    stale epochs, early stop after 15."""

    batch_size: int = 128
    max_epochs: int = 40
    lr: float = 1e-4
    early_stop_patience: int = 15
    plateau_patience: int = 7
    plateau_factor: float = 0.5
    improvement_threshold: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    shuffle: bool = True
    grad_clip: float | None = None   # global L2 norm cap, off by default

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "early_stop_patience",
                     "plateau_patience"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValidationError("plateau_factor must be in (0, 1)")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValidationError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def mae_loss(pred, target) -> Tensor:
    """Mean absolute error over a batch; differentiable (0 at ties)."""
    return mean_abs_error(pred, target)


@dataclass
class AdamState:
    """First/second moment estimates per named parameter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(named_params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    missing = [n for n in named_params if n not in grads or grads[n] is None]
    if missing:
        raise UsageError(f"missing gradients for {missing}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named_params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = sum(float(np.sum(np.square(g, dtype=np.float64)))
                for g in grads.values())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` consecutive stale epochs.

    An epoch is stale when the loss fails to beat the best seen by more
    than ``threshold``. The stale counter resets on every reduction.
    """

    def __init__(self, lr: float, patience: int, factor: float,
                 threshold: float = 1e-8):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class EarlyStopper:
    """Signal stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int, threshold: float = 1e-8):
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainHistory:
    """Per-epoch record of the run."""

    epochs: list = field(default_factory=list)
    train_mae: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def append(self, epoch, train, val, lr, secs):
        self.epochs.append(epoch)
        self.train_mae.append(train)
        self.val_mae.append(val)
        self.lr.append(lr)
        self.seconds.append(secs)

    def to_csv(self) -> str:
        lines = ["epoch,train_mae,val_mae,lr,seconds"]
        for i in range(len(self.epochs)):
            lines.append(f"{self.epochs[i]},{self.train_mae[i]:.10g},"
                         f"{self.val_mae[i]:.10g},{self.lr[i]:.10g},"
                         f"{self.seconds[i]:.3f}")
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    """Everything needed to reproduce predictions: config, scaler, weights."""

    config: HiSTMConfig
    scaler: ScalerParams
    tensors: dict               # name -> float32 ndarray
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_params(self, dtype=np.float32) -> HiSTMParams:
        """Rebuild a parameter tree from the stored tensors."""
        params = init_histm_params(self.config, RandomSource(0), dtype=dtype)
        stored = dict(self.tensors)
        for name, t in params.named_tensors():
            t.data = stored[name].astype(dtype)
        return params


def params_to_checkpoint(config: HiSTMConfig, params: HiSTMParams,
                         scaler: ScalerParams, meta: dict | None = None) -> Checkpoint:
    tensors = {name: np.asarray(t.data, dtype=np.float32).copy()
               for name, t in params.named_tensors()}
    return Checkpoint(config, scaler, tensors, meta or {})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the HSTM1 container atomically (temp file + rename)."""
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "scaler": ckpt.scaler.to_dict(),
        "manifest": manifest,
        "meta": ckpt.meta,
    }).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate an HSTM1 file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(
            f"bad magic {blob[:5]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 9:
        raise CheckpointTruncatedError("file ends inside the header length")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise CheckpointTruncatedError("file ends inside the JSON header")
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    config = HiSTMConfig.from_dict(header["config"])
    scaler = ScalerParams.from_dict(header["scaler"])
    expected = param_shapes(config)
    data = blob[9 + hlen:]
    tensors = {}
    for entry in header["manifest"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        if name not in expected:
            raise CheckpointShapeError(f"unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {shape}, config implies "
                f"{expected[name]}")
        count = int(np.prod(shape))
        start = int(entry["offset"])
        end = start + 4 * count
        if end > len(data):
            raise CheckpointTruncatedError(
                f"tensor {name!r} data extends past end of file")
        tensors[name] = np.frombuffer(data[start:end], dtype="<f4").reshape(shape).copy()
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointShapeError(f"missing tensors: {sorted(missing)}")
    return Checkpoint(config, scaler, tensors, header.get("meta", {}),
                      header.get("version", 1))


def _epoch_val_mae(params: HiSTMParams, cfg: HiSTMConfig, val: SampleSet,
                   batch_size: int) -> float:
    total = 0.0
    n = len(val)
    for start in range(0, n, batch_size):
        rows = np.arange(start, min(start + batch_size, n))
        xs, ys = val.gather(rows)
        preds = predict_batch(xs, params, cfg)
        total += float(np.abs(preds.data - ys).sum())
    return total / n


def train_loop(cfg: HiSTMConfig, params: HiSTMParams, train: SampleSet,
               val: SampleSet, tcfg: TrainConfig,
               log=None) -> tuple[Checkpoint, TrainHistory]:
    """Run the regimen and return the best checkpoint plus the history.

    Validation MAE (normalized scale) after each epoch drives the plateau
    scheduler, the early stopper, and best-checkpoint retention. The best
    checkpoint is returned, not the last.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValidationError("train and validation sets must be non-empty")
    named = dict(params.named_tensors())
    state = AdamState()
    sched = PlateauScheduler(tcfg.lr, tcfg.plateau_patience, tcfg.plateau_factor,
                             tcfg.improvement_threshold)
    stopper = EarlyStopper(tcfg.early_stop_patience, tcfg.improvement_threshold)
    history = TrainHistory()
    rng = RandomSource(tcfg.seed)
    lr = tcfg.lr
    best_val = np.inf
    best_tensors = None
    best_epoch = 0
    n = len(train)

    with finite_checks(False):
        for epoch in range(1, tcfg.max_epochs + 1):
            tic = time.perf_counter()
            order = (rng.derive(1000 + epoch).permutation(n) if tcfg.shuffle
                     else np.arange(n))
            abs_err = 0.0
            for start in range(0, n, tcfg.batch_size):
                rows = order[start:start + tcfg.batch_size]
                xs, ys = train.gather(rows)
                with GradTape() as tape:
                    preds = predict_batch(Tensor(xs), params, cfg)
                    loss = mean_abs_error(preds, Tensor(ys))
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch "
                        f"{start // tcfg.batch_size}")
                backward(loss, tape)
                grads = {name: t.grad for name, t in named.items()}
                if tcfg.grad_clip is not None:
                    clip_gradients(grads, tcfg.grad_clip)
                adam_step(named, grads, state, lr)
                abs_err += loss_val * len(rows)

            val_mae = _epoch_val_mae(params, cfg, val, tcfg.batch_size)
            secs = time.perf_counter() - tic
            history.append(epoch, abs_err / n, val_mae, lr, secs)
            if log is not None:
                log(f"epoch {epoch}: train_mae={abs_err / n:.6f} "
                    f"val_mae={val_mae:.6f} lr={lr:.2e} ({secs:.1f}s)")

            if val_mae < best_val:
                best_val = val_mae
                best_epoch = epoch
                best_tensors = {name: t.data.copy() for name, t in named.items()}
            lr = sched.update(val_mae)
            if stopper.update(val_mae):
                break

    ckpt = Checkpoint(cfg, train.scaler,
                      {name: arr.astype(np.float32)
                       for name, arr in best_tensors.items()},
                      {"epoch": best_epoch, "best_val_loss": best_val,
                       "seed": tcfg.seed})
    return ckpt, history
