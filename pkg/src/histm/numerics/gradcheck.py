"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from histm.errors import UsageError
from histm.numerics.tensor import GradTape, Tensor, backward


def grad_check(f, x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` maps the tensor to a scalar Tensor and must not keep state
    across calls; ``x`` should be float64 for the differences to resolve.
    Error per coordinate is |analytic - numeric| / max(1, |analytic|,
    |numeric|).
    """
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    if not x.requires_grad:
        raise UsageError("grad_check input must require gradients")

    x.grad = None
    with GradTape() as tape:
        out = f(x)
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, tape)
    analytic = x.grad.reshape(-1).astype(np.float64).copy()

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(f(x).data.reshape(()))
        flat[i] = orig - epsilon
        f_minus = float(f(x).data.reshape(()))
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
