"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Primitive operations (see ``ops``) record
themselves on the active ``GradTape``; ``backward`` replays the records in
reverse to populate ``grad`` on every participating leaf tensor.

Precision policy: tensors keep whatever float width they were created with
(float64 for oracle-grade checks, float32 for training). Operations never
silently change width.
"""

from __future__ import annotations

import threading

import numpy as np

from histm.errors import DimensionError, NumericDomainError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    """The innermost open GradTape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class finite_checks:
    """Context manager toggling per-operation finiteness validation.

    Checks are on by default; the training loop turns them off for the hot
    path and validates the loss instead.
    """

    _enabled = True

    def __init__(self, enabled: bool):
        self._want = enabled
        self._prev = None

    def __enter__(self):
        self._prev = finite_checks._enabled
        finite_checks._enabled = self._want
        return self

    def __exit__(self, *exc):
        finite_checks._enabled = self._prev
        return False


def checks_enabled() -> bool:
    return finite_checks._enabled


def check_finite(arr: np.ndarray, what: str) -> None:
    if finite_checks._enabled and not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"{what} contains non-finite values")


class Tensor:
    """Dense n-dimensional float array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def result_tensor(data: np.ndarray, *parents: Tensor) -> Tensor:
    """Build an operation output without re-validating its buffer."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.is_leaf = False
    if finite_checks._enabled:
        check_finite(data, "operation output")
    return out


class GradTape:
    """Ordered record of primitive operations, replayable in reverse.

    One tape per training step; never share a tape across threads. Entering
    the context makes the tape active so primitives record onto it.
    """

    __slots__ = ("records", "consumed", "_entered")

    def __init__(self):
        self.records = []
        self.consumed = False
        self._entered = False

    def __enter__(self):
        if self._entered:
            raise UsageError("GradTape context re-entered")
        self._entered = True
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("GradTape exited out of order")
        stack.pop()
        return False

    def record(self, out: Tensor, pairs) -> None:
        """Append one executed primitive.

        pairs: sequence of (input Tensor, vjp) where vjp maps the output
        adjoint to that input's adjoint contribution.
        """
        self.records.append((out, pairs))


def record_op(out: Tensor, pairs) -> None:
    """Record onto the active tape, if any input needs a gradient."""
    tape = active_tape()
    if tape is None or not out.requires_grad:
        return
    tape.record(out, [(t, vjp) for t, vjp in pairs if t.requires_grad])


def backward(output: Tensor, tape: GradTape) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from output.

    Adjoints are accumulated additively: a tensor consumed by k operations
    receives the sum of k contributions. The tape is consumed; a second
    backward on it is an error.
    """
    if tape.consumed:
        raise UsageError("backward on an already-consumed GradTape")
    if output.data.size != 1:
        raise UsageError(
            f"backward requires a scalar output, got shape {output.data.shape}")
    if not output.requires_grad:
        raise UsageError("backward output does not depend on any tracked tensor")
    tape.consumed = True

    adjoints = {id(output): np.ones_like(output.data)}
    leaves = {}
    for out, pairs in reversed(tape.records):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        for inp, vjp in pairs:
            contrib = vjp(g)
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + contrib
            else:
                adjoints[key] = contrib
            if inp.is_leaf:
                leaves[key] = inp

    for key, leaf in leaves.items():
        if key in adjoints:
            grad = np.asarray(adjoints[key], dtype=leaf.data.dtype)
            if grad.shape != leaf.data.shape:
                raise DimensionError(
                    f"adjoint shape {grad.shape} != leaf shape {leaf.data.shape}")
            leaf.grad = grad


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
