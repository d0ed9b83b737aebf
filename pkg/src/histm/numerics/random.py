"""Deterministic, counter-based random source and parameter initialization."""

from __future__ import annotations

import math

import numpy as np

from histm.errors import ConfigurationError
from histm.numerics.tensor import Tensor

_MASK64 = (1 << 64) - 1


class RandomSource:
    """Seeded Philox stream; equal seeds give identical draws everywhere.

    Philox is counter-based, so ``derive`` produces independent streams
    that do not depend on draw order elsewhere (safe for parallel use).
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, stream: int) -> "RandomSource":
        """Independent stream keyed by (seed, stream)."""
        return RandomSource(self.seed, stream)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, sigma: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, sigma, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _default_fan_in(shape) -> int:
    # [in, out] linear weights use the input extent; conv kernels
    # [out_ch, in_ch, k, k] use in_ch * k * k; vectors use their length.
    if len(shape) <= 2:
        return shape[0]
    return int(np.prod(shape[1:]))


def seeded_init(rng: RandomSource, shape, scheme: str, *, fan_in: int | None = None,
                sigma: float = 1.0, dtype=np.float64,
                requires_grad: bool = True) -> Tensor:
    """Draw a tensor deterministically from ``rng``.

    Schemes: ``uniform_fan_in`` draws U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    ``normal`` draws N(0, sigma); ``zeros``/``ones`` are constant. Draws are
    generated in float64 and cast, so the value stream is identical across
    precision modes.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    elif scheme == "uniform_fan_in":
        fi = fan_in if fan_in is not None else _default_fan_in(shape)
        if fi < 1:
            raise ConfigurationError(f"fan_in must be >= 1, got {fi}")
        bound = 1.0 / math.sqrt(fi)
        data = rng.uniform(-bound, bound, shape)
    elif scheme == "normal":
        data = rng.normal(sigma, shape)
    else:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=requires_grad)
