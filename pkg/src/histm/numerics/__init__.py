"""Tensor engine: dense arrays, reverse-mode autodiff, seeded init."""

from histm.numerics.gradcheck import grad_check
from histm.numerics.ops import (add, add_bias, causal_depthwise_conv1d, conv2d_same,
                                exp, matmul, mean_abs_error, mul, neg, relu, reshape,
                                selective_scan, silu, softmax_lastdim, softplus,
                                sum_all, take, transpose, weighted_sum_time)
from histm.numerics.random import RandomSource, seeded_init
from histm.numerics.tensor import (GradTape, Tensor, active_tape, as_tensor,
                                   backward, finite_checks)

__all__ = [
    "Tensor", "GradTape", "backward", "active_tape", "as_tensor", "finite_checks",
    "RandomSource", "seeded_init", "grad_check",
    "matmul", "add", "add_bias", "mul", "neg", "relu", "silu", "exp", "softplus",
    "softmax_lastdim", "conv2d_same", "causal_depthwise_conv1d", "selective_scan",
    "reshape", "transpose", "take", "weighted_sum_time", "sum_all",
    "mean_abs_error",
]
