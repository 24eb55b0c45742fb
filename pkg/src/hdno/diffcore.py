"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operation that produced them while grad mode is on; calling
``backward`` on a scalar walks the recorded graph once in reverse topological
order. Only the operations the recurrent models need are provided: matmul, add,
mul, concat, slice, sigmoid, tanh, exp, log, softmax, embedding lookup, sum,
mean and square. Subtraction, negation and division by constants are sugar
built from those.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class NumericFault(FloatingPointError):
    """A forward computation produced NaN or Inf."""


class GraphStateError(RuntimeError):
    """Graph methods called in the wrong order."""


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError("tensor dimensions must be positive")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(_toposort(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def square(self):
        return square(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def _needs_grad(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._backward is not None)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        names = ", ".join(repr(p) for p in parents)
        raise NumericFault(f"non-finite value produced by {op} on inputs ({names})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.op = op
    out.name = None
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if _needs_grad(a):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            ga = _unbroadcast(ga, a.shape)
        if _needs_grad(b):
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            elif b.ndim == 1:
                gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch {a.shape} + {b.shape}") from exc
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch {a.shape} * {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if _needs_grad(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _needs_grad(b) else None
        return ga, gb

    return _result(out, "mul", (a, b), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", ts, back)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    basic = _is_basic(key)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), "slice", (a,), back)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in keys)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, "log", (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), back)


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(out, "embedding", (table,), back)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, "sum", (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, "mean", (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    """log(softmax(a)) composed from add/exp/sum/log with a constant shift."""
    a = as_tensor(a)
    shift = -a.data.max(axis=axis, keepdims=True)
    shifted = add(a, shift)
    return shifted - log(sum_(exp(shifted), axis=axis, keepdims=True))


# Graph wrapper -------------------------------------------------------------


class Graph:
    """A scalar function of leaf tensors, evaluated and differentiated on demand."""

    def __init__(self, fn: Callable[..., Tensor], leaves: Sequence[Tensor]):
        self.fn = fn
        self.leaves = list(leaves)
        self.output: Tensor | None = None

    def forward(self) -> float:
        for leaf in self.leaves:
            leaf.grad = None
        out = self.fn(*self.leaves)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ShapeError("graph output must be a scalar tensor")
        self.output = out
        return float(out.data)

    def backward(self) -> list:
        if self.output is None:
            raise GraphStateError("backward called before forward")
        for leaf in self.leaves:
            leaf.grad = None
        self.output.backward()
        return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in self.leaves]


def forward(graph: Graph) -> float:
    return graph.forward()


def backward(graph: Graph) -> list:
    return graph.backward()


# Optimizers -----------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")


def _check_pairs(params, grads):
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")


def sgd_step(params: list, grads: list, state: OptimizerState) -> list:
    """In-place ``p -= lr * g`` on a list of arrays; returns the same list."""
    if state.kind != "sgd":
        raise ValueError("sgd_step needs an sgd optimizer state")
    _check_pairs(params, grads)
    for p, g in zip(params, grads):
        p -= state.learning_rate * g
    state.step += 1
    return params


def adam_step(params: list, grads: list, state: OptimizerState) -> list:
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam optimizer state")
    _check_pairs(params, grads)
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


def clip_grad_norm(grads: list, max_norm: float) -> tuple[list, float]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


# Gradient checking ----------------------------------------------------------


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``leaf.data``."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def grad_check(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
               rtol: float = 1e-4, atol: float = 1e-6) -> tuple[bool, float]:
    """Compare backward() against central differences.

    Returns (passed, worst relative error). An entry passes when its absolute
    error is within ``atol`` or its relative error within ``rtol``.
    """
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    out.backward()
    ok, worst = True, 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_grad(fn, leaf, h)
        err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), 0.0)
        bad = (err > atol) & (rel > rtol)
        if bad.any():
            ok = False
        worst = max(worst, float(np.max(np.where(err > atol, rel, 0.0))))
    return ok, worst
