"""N-dimensional tensors with reverse-mode automatic differentiation.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. A tape lives for one forward pass::

    with Tape():
        loss = (x * x).sum()
    loss.backward()

After ``backward`` the tape is freed; a second ``backward`` on the same loss
raises :class:`DetachedGraph`. Gradients accumulate into ``Tensor.grad``
until :meth:`Tensor.zero_grad`.

Broadcasting is deliberately limited to scalar-with-tensor and equal shapes.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from math import prod
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DetachedGraph,
    DomainError,
    NonFiniteInput,
    NonFiniteResult,
    NotScalar,
    ShapeMismatch,
)

_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Only the gradient checker uses this (with ``np.float64``); models and
    training always run in float32.
    """
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations for one forward pass.

    Confined to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node.output.tape = None
        self.nodes = []

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or not self.nodes:
            raise DetachedGraph("loss was not produced on this tape")

        pending = {id(loss): np.ones_like(loss.data)}
        # nodes were appended in execution order, so reversing is a valid
        # topological order and every node is visited once
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape is None:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
        self.clear()


def backward(loss: "Tensor") -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise DetachedGraph("loss has no tape; run the forward pass inside `with Tape():`")
    loss.tape.backward(loss)


class Tensor:
    """Dense float array with optional gradient tracking.

    ``tape`` is set on tensors produced by a recorded operation; leaves have
    ``tape is None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = np.broadcast_to(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor_from(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"dimensions must be positive, got {shape}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size != prod(shape):
        raise ShapeMismatch(f"{flat.size} values cannot fill shape {shape}")
    if not np.all(np.isfinite(flat)):
        raise NonFiniteInput("values contain NaN or Inf")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(data: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    """Wrap an op's output and record it when any input needs a gradient.

    ``grad_fn(g)`` maps the upstream gradient to one gradient (or None) per
    input. Used by :mod:`xraynet.layers` for fused primitives.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteResult("operation produced NaN or Inf")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            out.tape = tape
            tape.record(_Node(inputs, out, grad_fn))
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _binary_check(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g, t: Tensor):
    if t.shape == g.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _binary_check(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _binary_check(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _binary_check(a, b, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return make_result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu6(x: Tensor) -> Tensor:
    out = np.clip(x.data, 0, 6)
    return make_result(out, (x,), lambda g: (g * ((x.data > 0) & (x.data < 6)),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if prod(shape) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))
