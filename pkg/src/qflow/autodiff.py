"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Value` wraps a numpy array (rank 0, 1 or 2) and remembers the
values it was computed from together with a closure that pushes the
upstream gradient to them.  ``backward`` walks the graph once in reverse
topological order.

Leaves created with ``requires_grad=True`` (parameters) accumulate
gradients across calls until :func:`zero_grad` is called.  Values built
only from constants, or inside :func:`no_grad`, record nothing.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "as_value",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "scale",
    "sum",
    "mean",
    "sqnorm",
    "exp",
    "log",
    "log1pexp",
    "softplus",
    "sigmoid",
    "relu",
    "concat",
    "reshape",
    "backward",
    "zero_grad",
    "grad_check",
    "grad_check_params",
]


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A value or gradient became NaN or infinite."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tape:
    """Creation-ordered record of the non-leaf nodes built while active.

    Use as a context manager; nested tapes are allowed and the innermost
    one records.  Reset (or drop) the tape after each optimizer step.
    """

    def __init__(self):
        self.nodes: list[Value] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Value:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"Value supports rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Value":
        return Value(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(shape={self.data.shape}, op={self.op or 'leaf'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division by a Value is not supported; multiply by a constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x) -> Value:
    return Value(x)


def parameter(x, name: str = "") -> Value:
    return Value(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _make(data, parents: tuple, backward_fn, op: str) -> Value:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Value(data, op=op)
    out = Value(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Value, b: Value) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _acc(node: Value, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True).reshape(node.data.shape)
    else:
        node.grad += g


# ---------------------------------------------------------------- ops

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("add", a, b)

    def bw(g, out):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("sub", a, b)

    def bw(g, out):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Value:
    """Elementwise product (with rank-2 broadcasting)."""
    a, b = as_value(a), as_value(b)
    _check_broadcast("mul", a, b)

    def bw(g, out):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Value:
    a = as_value(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g, out: _acc(a, g * c), "scale")


def neg(a) -> Value:
    a = as_value(a)
    return _make(-a.data, (a,), lambda g, out: _acc(a, -g), "neg")


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, out):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Value:
    """Affine layer ``x @ weight.T + bias`` with weight of shape (out, in)."""
    x, weight = as_value(x), as_value(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_value(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g, o):
        if x.requires_grad:
            _acc(x, g @ weight.data)
        if weight.requires_grad:
            _acc(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _acc(bias, g.sum(axis=0))

    return _make(out, parents, bw, "linear")


def sum(a, axis: int | None = None) -> Value:  # noqa: A001
    a = as_value(a)
    shape = a.shape

    def bw(g, out):
        if axis is None:
            _acc(a, np.broadcast_to(g, shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(a.data.sum(axis=axis), (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Value:
    a = as_value(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def sqnorm(a, axis: int | None = None) -> Value:
    """Sum of squares, over everything or along ``axis``."""
    a = as_value(a)
    shape = a.shape

    def bw(g, out):
        gg = g if axis is None else np.expand_dims(g, axis)
        _acc(a, 2.0 * a.data * gg)

    return _make(np.square(a.data).sum(axis=axis), (a,), bw, "sqnorm")


def exp(a) -> Value:
    a = as_value(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g, out: _acc(a, g * out.data), "exp")


def log(a) -> Value:
    a = as_value(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive argument")
    return _make(np.log(a.data), (a,), lambda g, out: _acc(a, g / a.data), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, z) / (1.0 + z)


def _log1pexp_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``log(1 + e^x)`` and ``e^{-|x|}`` (reused for the derivative)."""
    if x.ndim == 0:
        e = np.exp(-np.abs(x))
        return np.log1p(e) + np.maximum(x, 0.0), e
    e = np.abs(x)
    np.negative(e, out=e)
    np.exp(e, out=e)
    out = np.log1p(e)
    out += np.maximum(x, 0.0)
    return out, e


def _sigmoid_from(x: np.ndarray, e: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _log1pexp(x: np.ndarray) -> np.ndarray:
    return _log1pexp_parts(x)[0]


def log1pexp(a) -> Value:
    """Overflow-free ``log(1 + exp(a))``."""
    a = as_value(a)
    val, e = _log1pexp_parts(a.data)
    return _make(val, (a,), lambda g, out: _acc(a, g * _sigmoid_from(a.data, e)), "log1pexp")


def softplus(a, beta: float = 1.0) -> Value:
    """``log(1 + exp(beta * a)) / beta``."""
    a = as_value(a)
    beta = float(beta)
    z = beta * a.data
    val, e = _log1pexp_parts(z)
    val /= beta
    return _make(val, (a,), lambda g, out: _acc(a, g * _sigmoid_from(z, e)), "softplus")


def sigmoid(a) -> Value:
    a = as_value(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g, out: _acc(a, g * s * (1.0 - s)), "sigmoid")


def relu(a) -> Value:
    a = as_value(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g, out: _acc(a, g * mask), "relu")


def concat(values: Sequence, axis: int = 1) -> Value:
    """Concatenate rank-2 values along the feature axis (or rows, axis=0)."""
    vals = [as_value(v) for v in values]
    for v in vals:
        if v.data.ndim != 2:
            raise ShapeError(f"concat: expected rank-2 operands, got {[u.shape for u in vals]}")
    try:
        data = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def bw(g, out):
        for v, lo, hi in zip(vals, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                _acc(v, g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _make(data, tuple(vals), bw, "concat")


def reshape(a, shape: tuple) -> Value:
    a = as_value(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _make(data, (a,), lambda g, out: _acc(a, g.reshape(old)), "reshape")


# ---------------------------------------------------------------- backward

def _topo_order(output: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack = [(output, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Value) -> None:
    """Accumulate d(output)/d(leaf) into every reachable leaf's ``grad``.

    Interior gradients are cleared afterwards; leaf gradients accumulate
    across calls.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        return
    order = _topo_order(output)
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad, node)
    for node in order:
        if node._backward is not None:
            node.grad = None


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- checking

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check(f: Callable[[Value], Value], point, eps: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a Value to a scalar Value.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    x0 = np.array(point, dtype=np.float64)
    leaf = parameter(x0)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: non-finite function value")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        with no_grad():
            fp = float(f(Value(xp.reshape(x0.shape))).data)
            fm = float(f(Value(xm.reshape(x0.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"grad_check: non-finite value at coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * eps)
    if not np.isfinite(analytic).all():
        raise NonFiniteError("grad_check: non-finite analytic gradient")
    return _rel_err(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Value], params: Sequence[Value],
                      eps: float = 1e-6, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` but perturbs parameter leaves in place.

    ``max_coords`` limits the number of coordinates checked per parameter
    (chosen with ``rng``); the rest are skipped.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    zero_grad(params)
    out = loss_fn()
    backward(out)
    worst = 0.0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(loss_fn().data)
                flat[i] = orig - eps
                fm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"grad_check_params: non-finite value for {p.name or 'param'}")
            numeric[j] = (fp - fm) / (2.0 * eps)
        worst = max(worst, _rel_err(analytic[idx], numeric))
    zero_grad(params)
    return worst
