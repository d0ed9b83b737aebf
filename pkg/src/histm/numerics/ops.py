"""Differentiable primitive operations.

Every function takes and returns ``Tensor`` objects and records a
vector-Jacobian product on the active tape. Batched layouts follow one
rule: the trailing axes hold one atomic unit of work (a frame, a
sequence) and leading axes are independent rows. Matrix products route
through numpy's gufunc loop so each unit is computed by an identically
shaped BLAS call no matter how many rows surround it; combined with
elementwise kernels this makes batched forward passes bitwise equal to
looping the per-unit functions.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from histm.errors import (ConfigurationError, DimensionError, NumericDomainError,
                          ValidationError)
from histm.numerics import kernels
from histm.numerics.tensor import (Tensor, as_tensor, check_finite, record_op,
                                   result_tensor)


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b`` with ``b`` 2-D and ``a`` [..., m, k].

    Leading axes of ``a`` are looped per-slice, never merged into the
    BLAS call, so every [m, k] unit gives the same bits regardless of
    batching.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects a [..., m, k] and b [k, n]; got {a.shape} and {b.shape}")
    k, n = b.data.shape
    if a.data.shape[-1] != k:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    # BLAS results depend on operand memory layout; normalizing keeps every
    # identically-valued call bitwise identical.
    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data)
    out = result_tensor(ad @ bd, a, b)

    def vjp_a(g):
        return (np.ascontiguousarray(g).reshape(-1, n) @ bd.T).reshape(a.data.shape)

    def vjp_b(g):
        return ad.reshape(-1, k).T @ np.ascontiguousarray(g).reshape(-1, n)

    record_op(out, [(a, vjp_a), (b, vjp_b)])
    return out


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.data.shape != y.data.shape:
        raise DimensionError(f"add shapes differ: {x.shape} vs {y.shape}")
    out = result_tensor(x.data + y.data, x, y)
    record_op(out, [(x, lambda g: g), (y, lambda g: g)])
    return out


def add_bias(x, b) -> Tensor:
    """x[..., n] + b[n]."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"bias {b.shape} does not match last axis of {x.shape}")
    n = b.data.shape[0]
    out = result_tensor(x.data + b.data, x, b)
    record_op(out, [(x, lambda g: g),
                    (b, lambda g: g.reshape(-1, n).sum(axis=0))])
    return out


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.data.shape != y.data.shape:
        raise DimensionError(f"mul shapes differ: {x.shape} vs {y.shape}")
    out = result_tensor(x.data * y.data, x, y)
    record_op(out, [(x, lambda g: g * y.data), (y, lambda g: g * x.data)])
    return out


def neg(x) -> Tensor:
    x = as_tensor(x)
    out = result_tensor(-x.data, x)
    record_op(out, [(x, lambda g: -g)])
    return out


def relu(x) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    x = as_tensor(x)
    check_finite(x.data, "relu input")
    out = result_tensor(np.maximum(x.data, 0), x)
    record_op(out, [(x, lambda g: g * (x.data > 0))])
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    check_finite(x.data, "silu input")
    sig = expit(x.data)
    out = result_tensor(x.data * sig, x)
    record_op(out, [(x, lambda g: g * (sig * (1.0 + x.data * (1.0 - sig))))])
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    check_finite(x.data, "exp input")
    out = result_tensor(np.exp(x.data), x)
    record_op(out, [(x, lambda g: g * out.data)])
    return out


def softplus(x) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    x = as_tensor(x)
    check_finite(x.data, "softplus input")
    # max(x, 0) + log1p(e^-|x|): same value as logaddexp(0, x) but SIMD-friendly
    data = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    out = result_tensor(data, x)
    record_op(out, [(x, lambda g: g * expit(x.data))])
    return out


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    x = as_tensor(x)
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = result_tensor(y, x)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    record_op(out, [(x, vjp)])
    return out


def _im2col(x: np.ndarray, k: int, pad: int):
    """Patch matrix [..., H*W, c_in*k*k] for a same-padded k x k window."""
    lead = x.shape[:-3]
    c_in = x.shape[-3]
    H, W = x.shape[-2:]
    widths = [(0, 0)] * len(lead) + [(0, 0), (pad, pad), (pad, pad)]
    xp = np.pad(x, widths)
    win = sliding_window_view(xp, (k, k), axis=(-2, -1))  # [..., c_in, H, W, k, k]
    cin_ax = len(lead)
    perm = (tuple(range(cin_ax)) + (cin_ax + 1, cin_ax + 2, cin_ax)
            + (cin_ax + 3, cin_ax + 4))
    patches = np.ascontiguousarray(win.transpose(perm))  # [..., H, W, c_in, k, k]
    return patches.reshape(lead + (H * W, c_in * k * k))


def _conv_forward(x: np.ndarray, wmat: np.ndarray, k: int, pad: int):
    """Raw conv: per-frame gufunc matmul of im2col rows against wmat."""
    lead = x.shape[:-3]
    H, W = x.shape[-2:]
    c_out = wmat.shape[1]
    pat2 = _im2col(x, k, pad)
    flat = pat2 @ wmat
    out = np.moveaxis(flat.reshape(lead + (H, W, c_out)), -1, -3)
    return np.ascontiguousarray(out), pat2


def conv2d_same(x, w, b) -> Tensor:
    """Same-padded 2-D cross-correlation.

    x: [..., c_in, H, W]; w: [c_out, c_in, k, k] with k odd; b: [c_out].
    Output spatial extent equals the input's. Each frame is one BLAS
    unit (im2col rows), so batching over leading axes is bitwise inert.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim < 3 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects x [..., c_in, H, W] and w [c_out, c_in, k, k]; "
            f"got {x.shape} and {w.shape}")
    c_out, c_in, kh, kw = w.data.shape
    if kh != kw:
        raise ConfigurationError(f"conv kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigurationError(f"conv kernel extent must be odd, got {kh}")
    if x.data.shape[-3] != c_in:
        raise DimensionError(
            f"conv input channels {x.data.shape[-3]} != weight channels {c_in}")
    if b.data.shape != (c_out,):
        raise DimensionError(f"conv bias shape {b.shape} != ({c_out},)")
    k = kh
    pad = (k - 1) // 2
    wmat = w.data.transpose(1, 2, 3, 0).reshape(c_in * k * k, c_out)
    raw, pat2 = _conv_forward(x.data, wmat, k, pad)
    out = result_tensor(raw + b.data[:, None, None], x, w, b)

    def vjp_x(g):
        # gradient w.r.t. the input is a conv of g with the weight
        # transposed over channels and flipped over both spatial axes
        wt = w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(
            c_out * k * k, c_in)
        gx, _ = _conv_forward(np.ascontiguousarray(g), wt, k, pad)
        return gx

    def vjp_w(g):
        g2 = np.moveaxis(g, -3, -1).reshape(-1, c_out)
        dwmat = pat2.reshape(-1, c_in * k * k).T @ g2
        return dwmat.reshape(c_in, k, k, c_out).transpose(3, 0, 1, 2)

    def vjp_b(g):
        return np.moveaxis(g, -3, -1).reshape(-1, c_out).sum(axis=0)

    record_op(out, [(x, vjp_x), (w, vjp_w), (b, vjp_b)])
    return out


def causal_depthwise_conv1d(x, w, b) -> Tensor:
    """Per-channel causal convolution over time.

    x: [..., T, E]; w: [E, k]; b: [E]. Left zero padding of k-1 keeps the
    length and makes y_t independent of inputs after t.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2:
        raise DimensionError(f"conv1d weight must be [E, k], got {w.shape}")
    e_ch, k = w.data.shape
    if k < 1:
        raise ConfigurationError(f"conv1d width must be >= 1, got {k}")
    if x.data.ndim < 2 or x.data.shape[-1] != e_ch:
        raise DimensionError(f"conv1d input {x.shape} does not match weight {w.shape}")
    if b.data.shape != (e_ch,):
        raise DimensionError(f"conv1d bias shape {b.shape} != ({e_ch},)")
    T = x.data.shape[-2]

    y = np.empty_like(x.data)
    y[...] = b.data
    for j in range(k):
        s = k - 1 - j
        if s >= T:
            continue
        if s == 0:
            y += w.data[:, j] * x.data
        else:
            y[..., s:, :] += w.data[:, j] * x.data[..., :T - s, :]
    out = result_tensor(y, x, w, b)

    def vjp_x(g):
        gx = np.zeros_like(x.data)
        for j in range(k):
            s = k - 1 - j
            if s >= T:
                continue
            if s == 0:
                gx += w.data[:, j] * g
            else:
                gx[..., :T - s, :] += w.data[:, j] * g[..., s:, :]
        return gx

    def vjp_w(g):
        gw = np.zeros_like(w.data)
        for j in range(k):
            s = k - 1 - j
            if s >= T:
                continue
            if s == 0:
                gw[:, j] = (x.data * g).reshape(-1, e_ch).sum(axis=0)
            else:
                prod = x.data[..., :T - s, :] * g[..., s:, :]
                gw[:, j] = prod.reshape(-1, e_ch).sum(axis=0)
        return gw

    def vjp_b(g):
        return g.reshape(-1, e_ch).sum(axis=0)

    record_op(out, [(x, vjp_x), (w, vjp_w), (b, vjp_b)])
    return out


def selective_scan(u, delta, A, B, C, D) -> Tensor:
    """Input-dependent linear state recurrence with skip connection.

    u, delta: [S, T, E] (or [T, E]); A: [E, N]; B, C: [S, T, N] (or [T, N]);
    D: [E]. Per sequence s and channel e the state h (size N) evolves as
    h_t = exp(delta_t A) * h_{t-1} + delta_t B_t u_t and the output is
    y_t = <C_t, h_t> + D_e u_t. Causal by construction; differentiable
    w.r.t. every input.
    """
    u, delta = as_tensor(u), as_tensor(delta)
    A, B, C, D = as_tensor(A), as_tensor(B), as_tensor(C), as_tensor(D)
    squeeze = u.data.ndim == 2
    u3 = u.data[None] if squeeze else u.data
    d3 = delta.data[None] if squeeze else delta.data
    b3 = B.data[None] if squeeze else B.data
    c3 = C.data[None] if squeeze else C.data
    if u3.ndim != 3:
        raise DimensionError(f"scan input must be [S, T, E] or [T, E], got {u.shape}")
    S, T, E = u3.shape
    if d3.shape != (S, T, E):
        raise DimensionError(f"delta shape {delta.shape} != input shape {u.shape}")
    if A.data.ndim != 2 or A.data.shape[0] != E:
        raise DimensionError(f"A must be [E, N] with E={E}, got {A.shape}")
    N = A.data.shape[1]
    if b3.shape != (S, T, N) or c3.shape != (S, T, N):
        raise DimensionError(
            f"B and C must be [S, T, N]={S, T, N}, got {B.shape} and {C.shape}")
    if D.data.shape != (E,):
        raise DimensionError(f"D must be [E]={E}, got {D.shape}")
    if not np.all(d3 > 0):
        raise NumericDomainError("scan requires delta > 0 elementwise")

    abar = np.exp(d3[..., None] * A.data)  # [S,T,E,N]
    h_all = np.empty((S, T, E, N), dtype=u3.dtype)
    y = np.empty_like(u3)
    kernels.scan_forward(u3, d3, abar, b3, c3, D.data, h_all, y)
    out = result_tensor(y[0] if squeeze else y, u, delta, A, B, C, D)

    cache = {}

    def grads(g):
        if "r" not in cache:
            g3 = g[None] if squeeze else g
            g3 = np.ascontiguousarray(g3, dtype=u3.dtype)
            du = np.empty_like(u3)
            dd = np.empty_like(u3)
            db = np.empty_like(b3)
            dc = np.empty_like(c3)
            da_rows = np.empty((S, E, N), dtype=u3.dtype)
            dd_rows = np.empty((S, E), dtype=u3.dtype)
            kernels.scan_backward(g3, u3, d3, abar, h_all, A.data, b3, c3,
                                  D.data, du, dd, db, dc, da_rows, dd_rows)
            if squeeze:
                du, dd, db, dc = du[0], dd[0], db[0], dc[0]
            cache["r"] = (du, dd, da_rows.sum(axis=0), db, dc, dd_rows.sum(axis=0))
        return cache["r"]

    record_op(out, [(u, lambda g: grads(g)[0]),
                    (delta, lambda g: grads(g)[1]),
                    (A, lambda g: grads(g)[2]),
                    (B, lambda g: grads(g)[3]),
                    (C, lambda g: grads(g)[4]),
                    (D, lambda g: grads(g)[5])])
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    if not data.flags["C_CONTIGUOUS"]:
        data = data.copy()
    out = result_tensor(data, x)
    record_op(out, [(x, lambda g: g.reshape(x.data.shape))])
    return out


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = result_tensor(x.data.transpose(axes), x)
    record_op(out, [(x, lambda g: g.transpose(inv))])
    return out


def take(x, idx) -> Tensor:
    """Basic slice/index of a tensor; the adjoint scatters back as zeros."""
    x = as_tensor(x)
    out = result_tensor(x.data[idx], x)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return gx

    record_op(out, [(x, vjp)])
    return out


def weighted_sum_time(alpha, h) -> Tensor:
    """c = sum_t alpha[..., t] * h[..., t, :], accumulated in time order."""
    alpha, h = as_tensor(alpha), as_tensor(h)
    if alpha.data.shape != h.data.shape[:-1]:
        raise DimensionError(
            f"weights {alpha.shape} do not match sequence {h.shape}")
    T = h.data.shape[-2]
    acc = alpha.data[..., 0, None] * h.data[..., 0, :]
    for t in range(1, T):
        acc = acc + alpha.data[..., t, None] * h.data[..., t, :]
    out = result_tensor(acc, alpha, h)

    def vjp_alpha(g):
        return np.stack([(g * h.data[..., t, :]).sum(axis=-1) for t in range(T)],
                        axis=-1)

    def vjp_h(g):
        return alpha.data[..., :, None] * g[..., None, :]

    record_op(out, [(alpha, vjp_alpha), (h, vjp_h)])
    return out


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = result_tensor(np.asarray(x.data.sum()), x)
    record_op(out, [(x, lambda g: np.full(x.data.shape, g, dtype=x.dtype))])
    return out


def mean_abs_error(pred, target) -> Tensor:
    """Mean absolute difference of two equal-length vectors (scalar output).

    Subgradient at exact ties is 0.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.ndim != 1 or target.data.ndim != 1:
        raise DimensionError("mean_abs_error expects 1-D inputs")
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"prediction and target lengths differ: {pred.shape} vs {target.shape}")
    n = pred.data.shape[0]
    if n == 0:
        raise ValidationError("mean_abs_error on an empty batch")
    diff = pred.data - target.data
    out = result_tensor(np.asarray(np.abs(diff).mean()), pred, target)
    record_op(out, [(pred, lambda g: g * np.sign(diff) / n),
                    (target, lambda g: -g * np.sign(diff) / n)])
    return out
