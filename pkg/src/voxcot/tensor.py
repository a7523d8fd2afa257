"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient buffer.  Operations in
:mod:`voxcot.ops` link output tensors to their inputs with a backward closure;
``Tensor.backward()`` replays that tape in reverse topological order, visiting
each node exactly once and accumulating gradients additively across fan-out.

Tensors are immutable after creation except for ``grad`` (and ``data`` of leaf
parameters, which the optimizer updates between forward passes).  Forward
outputs are checked for NaN/Inf: a non-finite value raises instead of
propagating silently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = ["Tensor", "EngineError", "NumericsError", "no_grad", "is_grad_enabled"]

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class EngineError(ValueError):
    """Shape or parameter violation in an engine operation."""


class NumericsError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / MC sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def check_finite(arr: np.ndarray, op: str):
    # One reduction instead of isfinite().all(): a NaN/Inf anywhere poisons the sum.
    if not math.isfinite(float(arr.sum())):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- graph construction (used by ops) ------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._op = op
        return out

    # -- properties -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no tape linkage."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None):
        """Run the tape from this node; gradients land in ``.grad`` of leaves."""
        if not self.requires_grad:
            raise EngineError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise EngineError("backward() without an explicit gradient requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise EngineError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        tape = []
        visited = set()

        def build(t: Tensor):
            if id(t) in visited:
                return
            visited.add(id(t))
            for p in t._parents:
                if p.requires_grad:
                    build(p)
            tape.append(t)

        build(self)
        self.accumulate_grad(grad)
        for t in reversed(tape):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- operator sugar (delegates to ops to keep one implementation) ---------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul_scalar(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{grad}, op={self._op})"
