"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``eval``, ``rollout``, ``gradcheck``,
``analyze``. Options can come from a ``--config`` file of ``key = value``
lines; explicit flags override file values. Every run echoes its fully
resolved configuration to ``<out>/run_config`` so it can be replayed.

Exit codes: 0 success, 1 failed check, 2 usage, 3 validation, 4 I/O,
5 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from histm import data as dt
from histm import evaluation as ev
from histm.errors import (CheckpointError, ConfigurationError, DivergenceError,
                          HistmError, ParseError, UsageError, ValidationError)
from histm.model import HiSTMConfig, init_histm_params, param_count, predict_batch
from histm.numerics import (GradTape, RandomSource, Tensor, backward, grad_check,
                            mean_abs_error, sum_all)
from histm.training import (TrainConfig, load_checkpoint, save_checkpoint,
                            train_loop)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_DIVERGENCE = 5

_MODEL_KEYS = ("window_len", "kernel_size", "channels", "num_layers",
               "conv_kernel", "mlp_hidden", "mamba_d_state", "mamba_d_conv",
               "mamba_expand")
_TRAIN_KEYS = ("batch_size", "max_epochs", "lr", "early_stop_patience",
               "plateau_patience", "plateau_factor", "seed", "precision",
               "train_stride", "grad_clip")


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; '#' starts a comment line."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def write_run_config(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config"), "w") as fh:
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")


def _resolve(args, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_vals = read_config_file(args.config)
        unknown = set(file_vals) - set(defaults)
        if unknown:
            raise ValidationError(
                f"unknown config keys: {sorted(unknown)} (valid: {sorted(defaults)})")
        for key, raw in file_vals.items():
            resolved[key] = _coerce(raw, defaults[key])
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _coerce(raw: str, template):
    if isinstance(template, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if template is None:
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def _default_out(name: str) -> str:
    root = os.environ.get("HISTM_OUT", ".")
    return os.path.join(root, name)


def _model_config(resolved: dict) -> HiSTMConfig:
    return HiSTMConfig(**{k: int(resolved[k]) for k in _MODEL_KEYS})


def _load_series(path: str) -> dt.GridSeries:
    if not os.path.exists(path):
        raise ValidationError(f"data file not found: {path}")
    return dt.load_series(path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    defaults = {"h": 20, "w": 20, "days": 14, "interval": 10, "seed": 7}
    resolved = _resolve(args, defaults)
    if resolved["days"] < 1 or resolved["h"] < 1 or resolved["w"] < 1:
        raise ValidationError("h, w and days must be positive")
    out = args.out or _default_out("synth_out")
    series = dt.generate_synthetic(resolved["h"], resolved["w"], resolved["days"],
                                   resolved["interval"], resolved["seed"])
    os.makedirs(out, exist_ok=True)
    dt.save_long_csv(series, os.path.join(out, "series.csv"))
    dt.write_dense_grid(series, os.path.join(out, "series.grid"))
    write_run_config(out, {**resolved, "command": "synth"})
    print(f"wrote {series.t_total} frames of {series.height}x{series.width} "
          f"to {out}/series.csv and {out}/series.grid")
    return EXIT_OK


_TRAIN_DEFAULTS = {
    "window_len": 6, "kernel_size": 11, "channels": 16, "num_layers": 2,
    "conv_kernel": 3, "mlp_hidden": 32, "mamba_d_state": 16, "mamba_d_conv": 4,
    "mamba_expand": 2,
    "batch_size": 128, "max_epochs": 40, "lr": 1e-4, "early_stop_patience": 15,
    "plateau_patience": 7, "plateau_factor": 0.5, "seed": 0,
    "precision": "float32", "train_stride": 6, "grad_clip": None,
}


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    out = args.out or _default_out("train_out")
    series = _load_series(args.data)
    cfg = _model_config(resolved)
    spec = dt.WindowSpec(cfg.window_len, cfg.kernel_size,
                         int(resolved["train_stride"]))
    splits = dt.chronological_split(series.t_total, min_len=cfg.window_len + 1)

    tcfg = TrainConfig(
        batch_size=int(resolved["batch_size"]),
        max_epochs=int(resolved["max_epochs"]),
        lr=float(resolved["lr"]),
        early_stop_patience=int(resolved["early_stop_patience"]),
        plateau_patience=int(resolved["plateau_patience"]),
        plateau_factor=float(resolved["plateau_factor"]),
        seed=int(resolved["seed"]),
        precision=str(resolved["precision"]),
        grad_clip=(None if resolved["grad_clip"] in (None, "none")
                   else float(resolved["grad_clip"])),
    )

    train_idx = dt.make_window_index(series, spec, splits[0])
    scaler = dt.scaler_fit(series, train_idx, spec)
    train_set = dt.build_sample_set(series, splits[0], spec, scaler, tcfg.dtype)
    val_set = dt.build_sample_set(series, splits[1], spec, scaler, tcfg.dtype)

    n_params = param_count(cfg)
    print(f"model parameters: {n_params} "
          f"(reference architecture reports 33,794 at full scale)")
    print(f"train samples: {len(train_set)}, val samples: {len(val_set)}")

    params = init_histm_params(cfg, RandomSource(tcfg.seed), tcfg.dtype)
    ckpt, history = train_loop(cfg, params, train_set, val_set, tcfg, log=print)

    os.makedirs(out, exist_ok=True)
    save_checkpoint(ckpt, os.path.join(out, "best.ckpt"))
    with open(os.path.join(out, "history.csv"), "w") as fh:
        fh.write(history.to_csv())
    write_run_config(out, {**resolved, "command": "train", "data": args.data,
                           "param_count": n_params})
    print(f"best epoch {ckpt.meta['epoch']} "
          f"(val_mae={ckpt.meta['best_val_loss']:.6f}); artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    defaults = {"split": "test", "stride": 1, "batch_size": 512,
                "ssim_window": 11, "mape_floor": 1.0, "cell": ""}
    resolved = _resolve(args, defaults)
    out = args.out or _default_out("eval_out")
    ckpt = load_checkpoint(args.ckpt)
    series = _load_series(args.data)
    cfg = ckpt.config
    splits = dt.chronological_split(series.t_total, min_len=cfg.window_len + 1)
    names = {"train": 0, "val": 1, "test": 2}
    if resolved["split"] not in names:
        raise ValidationError(f"unknown split {resolved['split']!r}")
    t_range = splits[names[resolved["split"]]]
    spec = dt.WindowSpec(cfg.window_len, cfg.kernel_size, int(resolved["stride"]))
    sample_set = dt.build_sample_set(series, t_range, spec, ckpt.scaler)
    predictor = ev.HiSTMPredictor.from_checkpoint(ckpt)
    report = ev.evaluate_single_step(predictor, sample_set,
                                     int(resolved["batch_size"]),
                                     int(resolved["ssim_window"]),
                                     float(resolved["mape_floor"]))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    if resolved["cell"]:
        try:
            i, j = (int(v) for v in str(resolved["cell"]).split(","))
        except ValueError:
            raise ValidationError(f"cell must be 'row,col', got {resolved['cell']!r}")
        rows, cell_mape = ev.cell_profile(predictor, series, (i, j), t_range,
                                          spec, ckpt.scaler,
                                          mape_floor=float(resolved["mape_floor"]))
        with open(os.path.join(out, "trajectory.csv"), "w") as fh:
            fh.write(ev.trajectory_to_csv(rows))
        print(f"cell ({i},{j}) mape,{cell_mape:.10g}")
    write_run_config(out, {**resolved, "command": "eval", "ckpt": args.ckpt,
                           "data": args.data})
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_rollout(args) -> int:
    defaults = {"steps": 6, "start": 0, "boundary_fill": "hold_last",
                "batch_size": 512, "ssim_window": 11, "split": "test"}
    resolved = _resolve(args, defaults)
    out = args.out or _default_out("rollout_out")
    ckpt = load_checkpoint(args.ckpt)
    series = _load_series(args.data)
    cfg = ckpt.config
    splits = dt.chronological_split(series.t_total, min_len=cfg.window_len + 1)
    names = {"train": 0, "val": 1, "test": 2}
    if resolved["split"] not in names:
        raise ValidationError(f"unknown split {resolved['split']!r}")
    lo, _hi = splits[names[resolved["split"]]]
    start_t = lo + int(resolved["start"])
    spec = dt.WindowSpec(cfg.window_len, cfg.kernel_size, 1)
    rcfg = ev.RolloutConfig(int(resolved["steps"]), str(resolved["boundary_fill"]))
    predictor = ev.HiSTMPredictor.from_checkpoint(ckpt)
    steps = ev.autoregressive_rollout(predictor, series, start_t, spec,
                                      ckpt.scaler, rcfg,
                                      int(resolved["batch_size"]),
                                      int(resolved["ssim_window"]))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "rollout.csv"), "w") as fh:
        fh.write(ev.rollout_to_csv(steps))
    with open(os.path.join(out, "rollout.json"), "w") as fh:
        json.dump([s.to_dict() for s in steps], fh, indent=2)
        fh.write("\n")
    write_run_config(out, {**resolved, "command": "rollout", "ckpt": args.ckpt,
                           "data": args.data, "start_t": start_t})
    print(ev.rollout_to_csv(steps), end="")
    return EXIT_OK


_GRADCHECK_PARAM_CAP = 5000


def cmd_gradcheck(args) -> int:
    defaults = {"window_len": 2, "kernel_size": 3, "channels": 4, "num_layers": 1,
                "conv_kernel": 3, "mlp_hidden": 8, "mamba_d_state": 4,
                "mamba_d_conv": 2, "mamba_expand": 2, "seed": 0,
                "tolerance": 1e-4, "batch": 3}
    resolved = _resolve(args, defaults)
    cfg = _model_config(resolved)
    n_params = param_count(cfg)
    if n_params > _GRADCHECK_PARAM_CAP:
        raise UsageError(
            f"gradcheck config has {n_params} parameters; cap is "
            f"{_GRADCHECK_PARAM_CAP} (finite differences would be too slow)")
    rng = RandomSource(int(resolved["seed"]))
    params = init_histm_params(cfg, rng, dtype=np.float64)
    b = int(resolved["batch"])
    xs = rng.derive(1).uniform(0.0, 1.0,
                               (b, cfg.window_len, cfg.kernel_size, cfg.kernel_size))
    ys = rng.derive(2).uniform(0.0, 1.0, (b,))

    sabotage = bool(getattr(args, "sabotage", False))
    worst = 0.0
    for name, tensor in params.named_tensors():
        def f(t, name=name):
            preds = predict_batch(Tensor(xs), params, cfg)
            return mean_abs_error(preds, Tensor(ys))
        err = grad_check(f, tensor)
        if sabotage:
            err += 1.0  # negative control: force a failing report
        worst = max(worst, err)
    tol = float(resolved["tolerance"])
    print(f"max relative gradient error: {worst:.3e} (tolerance {tol:g})")
    return EXIT_OK if worst < tol else EXIT_CHECK_FAILED


def cmd_analyze(args) -> int:
    defaults = {"cell": "", "m": 2, "lags": "1,6,72,144"}
    resolved = _resolve(args, defaults)
    out = args.out or _default_out("analyze_out")
    series = _load_series(args.data)
    if resolved["cell"]:
        try:
            i, j = (int(v) for v in str(resolved["cell"]).split(","))
        except ValueError as e:
            raise ValidationError(f"cell must be 'row,col', got {resolved['cell']!r}")
        if not (0 <= i < series.height and 0 <= j < series.width):
            raise ValidationError(
                f"cell ({i},{j}) outside the {series.height}x{series.width} grid")
    else:
        i, j = series.height // 2, series.width // 2
    lags = [int(v) for v in str(resolved["lags"]).split(",") if v]
    cell_series = series.frames[:, i, j].astype(np.float64)
    agg_series = series.frames.mean(axis=(1, 2)).astype(np.float64)

    m = int(resolved["m"])
    rows = [("cell_apen", dt.approximate_entropy(cell_series, m)),
            ("aggregate_apen", dt.approximate_entropy(agg_series, m))]
    for lag in lags:
        rows.append((f"cell_autocorr_lag{lag}",
                     dt.lag_autocorrelation(cell_series, lag)))
        rows.append((f"aggregate_autocorr_lag{lag}",
                     dt.lag_autocorrelation(agg_series, lag)))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "diagnostics.csv"), "w") as fh:
        fh.write("metric,value\n")
        for name, value in rows:
            fh.write(f"{name},{value:.10g}\n")
    write_run_config(out, {**resolved, "command": "analyze", "data": args.data,
                           "cell": f"{i},{j}"})
    for name, value in rows:
        print(f"{name},{value:.10g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for key in _MODEL_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histm",
        description="Hierarchical spatiotemporal Mamba traffic forecaster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate deterministic synthetic traffic")
    p.add_argument("--config")
    p.add_argument("--out")
    for key in ("h", "w", "days", "interval", "seed"):
        p.add_argument(f"--{key}", dest=key, type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a series file")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    _add_model_flags(p)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--lr", dest="lr", type=float)
    p.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    p.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    p.add_argument("--plateau-factor", dest="plateau_factor", type=float)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--precision", dest="precision", choices=["float32", "float64"])
    p.add_argument("--train-stride", dest="train_stride", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="single-step evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--split", dest="split", choices=["train", "val", "test"])
    p.add_argument("--stride", dest="stride", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--ssim-window", dest="ssim_window", type=int)
    p.add_argument("--mape-floor", dest="mape_floor", type=float)
    p.add_argument("--cell", dest="cell",
                   help="also write a t,truth,pred trajectory for this row,col")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="autoregressive multi-step evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--steps", dest="steps", type=int)
    p.add_argument("--start", dest="start", type=int)
    p.add_argument("--split", dest="split", choices=["train", "val", "test"])
    p.add_argument("--boundary-fill", dest="boundary_fill",
                   choices=["hold_last", "true_values"])
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--ssim-window", dest="ssim_window", type=int)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model gradient")
    p.add_argument("--config")
    _add_model_flags(p)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--tolerance", dest="tolerance", type=float)
    p.add_argument("--batch", dest="batch", type=int)
    p.add_argument("--sabotage", action="store_true",
                   help="debug: force a failing result")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="series regularity diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--cell", dest="cell")
    p.add_argument("--m", dest="m", type=int)
    p.add_argument("--lags", dest="lags")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except HistmError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
