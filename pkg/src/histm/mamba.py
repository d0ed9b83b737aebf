"""Selective state-space sequence block (gated Mamba block).

The block maps [T, d_model] sequences to [T, d_model]: an input projection
splits into a stream and a gate; the stream passes through a causal
depthwise convolution, SiLU, and input-dependent projections that feed the
selective scan; the scan output is gated by SiLU(gate) and projected back.
Everything is causal: position t never sees inputs after t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from histm.errors import ConfigurationError, DimensionError, NumericDomainError
from histm.numerics import (RandomSource, Tensor, add_bias, causal_depthwise_conv1d,
                            exp, matmul, mul, neg, reshape, seeded_init,
                            selective_scan, silu, softplus, take)


@dataclass(frozen=True)
class MambaConfig:
    """Extents of one block. d_inner = expand * d_model."""

    d_model: int
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2

    def __post_init__(self):
        for name in ("d_model", "d_state", "d_conv", "expand"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.d_model / 16))


@dataclass
class MambaParams:
    """Learnable tensors of one block.

    A = -exp(A_log) keeps the state transition strictly contractive for
    any positive step size.
    """

    in_proj_w: Tensor     # [d_model, 2*d_inner]
    conv_w: Tensor        # [d_inner, d_conv]
    conv_b: Tensor        # [d_inner]
    x_proj_w: Tensor      # [d_inner, dt_rank + 2*d_state]
    dt_proj_w: Tensor     # [dt_rank, d_inner]
    dt_proj_b: Tensor     # [d_inner]
    A_log: Tensor         # [d_inner, d_state]
    D_skip: Tensor        # [d_inner]
    out_proj_w: Tensor    # [d_inner, d_model]

    def named_tensors(self):
        for name in ("in_proj_w", "conv_w", "conv_b", "x_proj_w", "dt_proj_w",
                     "dt_proj_b", "A_log", "D_skip", "out_proj_w"):
            yield name, getattr(self, name)


def mamba_param_shapes(cfg: MambaConfig) -> dict[str, tuple[int, ...]]:
    e, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
    return {
        "in_proj_w": (cfg.d_model, 2 * e),
        "conv_w": (e, cfg.d_conv),
        "conv_b": (e,),
        "x_proj_w": (e, r + 2 * n),
        "dt_proj_w": (r, e),
        "dt_proj_b": (e,),
        "A_log": (e, n),
        "D_skip": (e,),
        "out_proj_w": (e, cfg.d_model),
    }


def _tiled_identity(d_model: int, d_inner: int, scale: float = 1.0) -> np.ndarray:
    """[d_model, d_inner] map where inner channel j reads input j % d_model."""
    eye = np.zeros((d_model, d_inner))
    for j in range(d_inner):
        eye[j % d_model, j] = scale
    return eye


def init_mamba_params(cfg: MambaConfig, rng: RandomSource, dtype=np.float32,
                      identity_eps: float = 0.3,
                      gate_lane: int | None = None) -> MambaParams:
    """Deterministic initialization, identity-leaning.

    The untrained block approximates a per-channel map instead of
    scrambling its input: the stream projection starts as a tiled
    identity, the causal conv as the current tap, and the output
    projection folds the inner channels straight back. The gate has no
    bias parameter, so when ``gate_lane`` names an input channel that
    carries a constant (see init_histm_params), the gate columns read
    that lane and SiLU(gate) starts out flat, the same role a forget-gate
    bias plays in LSTM initialization. Without a lane the gate mirrors
    the stream pattern. ``identity_eps`` scales the symmetry-breaking
    fan-in noise added everywhere.

    A_log rows start as log([1..d_state]) so A = -[1..d_state]; the dt
    projection bias is set so softplus of it is log-spaced in
    [1e-3, 1e-1], keeping early step sizes small and the recurrence calm.
    """
    e = cfg.d_inner
    dt = np.logspace(-3, -1, num=e)
    dt_bias = np.log(np.expm1(dt))  # softplus inverse
    a_log = np.tile(np.log(np.arange(1, cfg.d_state + 1, dtype=np.float64)), (e, 1))

    def noisy(shape, base=None, fan_in=None, eps=identity_eps):
        t = seeded_init(rng, shape, "uniform_fan_in", fan_in=fan_in, dtype=dtype)
        t.data *= np.asarray(eps, dtype=dtype)
        if base is not None:
            t.data += base.astype(dtype)
        return t

    stream_eye = _tiled_identity(cfg.d_model, e)
    if gate_lane is None:
        gate_base = stream_eye
    else:
        gate_base = np.zeros((cfg.d_model, e))
        gate_base[gate_lane, :] = 1.0
    in_proj_base = np.concatenate([stream_eye, gate_base], axis=1)
    conv_base = np.zeros((e, cfg.d_conv))
    conv_base[:, -1] = 1.0  # current tap
    out_base = _tiled_identity(cfg.d_model, e, scale=1.0 / cfg.expand).T

    return MambaParams(
        in_proj_w=noisy((cfg.d_model, 2 * e), base=in_proj_base),
        conv_w=noisy((e, cfg.d_conv), base=conv_base, fan_in=cfg.d_conv),
        conv_b=seeded_init(rng, (e,), "zeros", dtype=dtype),
        x_proj_w=noisy((e, cfg.dt_rank + 2 * cfg.d_state)),
        dt_proj_w=seeded_init(rng, (cfg.dt_rank, e), "uniform_fan_in", dtype=dtype),
        dt_proj_b=Tensor(dt_bias.astype(dtype), requires_grad=True),
        A_log=Tensor(a_log.astype(dtype), requires_grad=True),
        D_skip=seeded_init(rng, (e,), "ones", dtype=dtype),
        out_proj_w=noisy((e, cfg.d_model), base=out_base),
    )


def discretize(delta: np.ndarray, A: np.ndarray, B_t: np.ndarray):
    """Zero-order-hold step matrices: Abar = exp(delta*A), Bbar = delta*B.

    delta: [T, d_inner] (> 0); A: [d_inner, d_state] (< 0); B_t: [T, d_state].
    Returns (Abar, Bbar), both [T, d_inner, d_state]. The input matrix uses
    the simplified Euler rule.
    """
    delta = np.asarray(delta)
    A = np.asarray(A)
    B_t = np.asarray(B_t)
    if delta.ndim != 2 or A.ndim != 2 or B_t.ndim != 2:
        raise DimensionError("discretize expects delta [T,E], A [E,N], B [T,N]")
    if delta.shape[1] != A.shape[0] or B_t.shape[1] != A.shape[1] \
            or B_t.shape[0] != delta.shape[0]:
        raise DimensionError(
            f"inconsistent extents: delta {delta.shape}, A {A.shape}, B {B_t.shape}")
    if not np.all(delta > 0):
        raise NumericDomainError("discretize requires delta > 0 elementwise")
    if not np.all(A < 0):
        raise NumericDomainError("discretize requires A < 0 elementwise")
    abar = np.exp(delta[:, :, None] * A[None, :, :])
    bbar = delta[:, :, None] * B_t[:, None, :]
    return abar, bbar


def mamba_batched(x, params: MambaParams, cfg: MambaConfig) -> Tensor:
    """Apply the block to S independent sequences: [S, T, d_model] in and out."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"mamba_batched expects [S, T, d_model], got {x.shape}")
    if x.data.shape[2] != cfg.d_model:
        raise DimensionError(
            f"input width {x.data.shape[2]} != d_model {cfg.d_model}")
    e, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank

    # project with column slices of the stored weights: cheaper adjoints
    # than slicing the (much larger) projected activations
    w_in = params.in_proj_w
    stream = matmul(x, take(w_in, (slice(None), slice(0, e))))
    gate = matmul(x, take(w_in, (slice(None), slice(e, 2 * e))))
    stream = silu(causal_depthwise_conv1d(stream, params.conv_w, params.conv_b))

    w_x = params.x_proj_w
    delta_raw = matmul(stream, take(w_x, (slice(None), slice(0, r))))
    b_t = matmul(stream, take(w_x, (slice(None), slice(r, r + n))))
    c_t = matmul(stream, take(w_x, (slice(None), slice(r + n, r + 2 * n))))
    delta = softplus(add_bias(matmul(delta_raw, params.dt_proj_w), params.dt_proj_b))

    a_mat = neg(exp(params.A_log))
    y = selective_scan(stream, delta, a_mat, b_t, c_t, params.D_skip)
    gated = mul(y, silu(gate))
    return matmul(gated, params.out_proj_w)                 # [S,T,d_model]


def mamba_block_forward(x, params: MambaParams, cfg: MambaConfig) -> Tensor:
    """Single sequence [T, d_model] -> [T, d_model]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"mamba_block_forward expects [T, d_model], got {x.shape}")
    t_len, d = x.data.shape
    out = mamba_batched(reshape(x, (1, t_len, d)), params, cfg)
    return reshape(out, (t_len, d))
