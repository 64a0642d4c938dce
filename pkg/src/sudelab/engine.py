"""Small reverse-mode autodiff over dense float64 arrays.

Every operation returns a new :class:`Array` that remembers its parents and a
closure mapping the output cotangent to parent cotangents.  :func:`backward`
walks the graph in reverse topological order.  :func:`detach` produces a
value-identical leaf that never propagates gradient.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Array:
    __slots__ = ("value", "requires_grad", "name", "_parents", "_backward", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Array, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Array:
    return Array(value, requires_grad=False)


def parameter(value, name: str | None = None) -> Array:
    return Array(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _node(value: np.ndarray, parents: Sequence[Array], fn) -> Array:
    out = Array(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only trailing-aligned broadcasting (bias rows, scalars) is supported
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Array, b: Array, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "add")
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "sub")
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a, k: float) -> Array:
    a = as_array(a)
    k = float(k)
    return _node(a.value * k, (a,), lambda g: (g * k,))


def matmul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(a) -> Array:
    a = as_array(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def reshape(a, shape: Sequence[int]) -> Array:
    a = as_array(a)
    src = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a, axis: int | None = None) -> Array:  # noqa: A001 - mirrors numpy
    a = as_array(a)
    src = a.shape
    if axis is None:
        return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    out = a.value.sum(axis=axis)
    return _node(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),))


def mse(a, b) -> Array:
    """Sum (not mean) of squared differences; scalar output."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    return _node(np.asarray(np.sum(diff * diff)), (a, b),
                 lambda g: (2.0 * g * diff, -2.0 * g * diff))


def row_mse(a, b) -> Array:
    """Per-row sum of squared differences for (batch, dim) inputs -> (batch,)."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"row_mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    return _node(np.sum(diff * diff, axis=-1), (a, b),
                 lambda g: (2.0 * g[..., None] * diff, -2.0 * g[..., None] * diff))


# --- stop-gradient -------------------------------------------------------

class _ReplayState(threading.local):
    def __init__(self):
        self.mode: str | None = None  # None | "record" | "replay"
        self.values: list[np.ndarray] = []
        self.cursor = 0


_replay = _ReplayState()


def detach(a) -> Array:
    a = as_array(a)
    value = a.value
    if _replay.mode == "record":
        _replay.values.append(value.copy())
    elif _replay.mode == "replay":
        value = _replay.values[_replay.cursor]
        _replay.cursor += 1
    return Array(value.copy(), requires_grad=False)


@contextmanager
def _frozen_detach(mode: str, values: list[np.ndarray] | None = None):
    prev = (_replay.mode, _replay.values, _replay.cursor)
    _replay.mode = mode
    _replay.values = [] if values is None else values
    _replay.cursor = 0
    try:
        yield _replay.values
    finally:
        _replay.mode, _replay.values, _replay.cursor = prev


# --- backward ------------------------------------------------------------

def _toposort(root: Array) -> list[Array]:
    order: list[Array] = []
    seen: set[int] = set()
    stack: list[tuple[Array, bool]] = [(root, False)]
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


def backward(loss: Array, params: Iterable[Array]) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``, keyed by ``id(param)``.

    Parameters that the loss does not reach map to zero arrays.
    """
    params = list(params)
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    return {id(p): np.array(grads.get(id(p), np.zeros_like(p.value)), copy=True) for p in params}


def grad(loss: Array, params: Sequence[Array]) -> list[np.ndarray]:
    g = backward(loss, params)
    return [g[id(p)] for p in params]


# --- finite differences ----------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_error < self.tolerance)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Elementwise |a-b| / max(|a|, |b|, floor); the floor keeps round-off on
    near-zero gradients from reading as a large relative error."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_check(f: Callable[[Array], Array], params, step: float = 1e-5,
                      tolerance: float = 1e-4, freeze_detached: bool = True) -> GradCheckReport:
    """Compare tape gradients of ``f`` at ``params`` against central differences.

    With ``freeze_detached`` every :func:`detach` inside ``f`` replays the value
    it produced at the unperturbed point, which is the function the tape
    actually differentiates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(params.value if isinstance(params, Array) else params, dtype=np.float64)
    p = parameter(base)
    if freeze_detached:
        with _frozen_detach("record") as recorded:
            loss = f(p)
    else:
        recorded = None
        loss = f(p)
    analytic = grad(loss, [p])[0]

    def evaluate(x: np.ndarray) -> float:
        if recorded is None:
            return f(constant(x)).item()
        with _frozen_detach("replay", recorded):
            return f(constant(x)).item()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        up = base.copy().reshape(-1)
        dn = base.copy().reshape(-1)
        up[i] += step
        dn[i] -= step
        flat[i] = (evaluate(up.reshape(base.shape)) - evaluate(dn.reshape(base.shape))) / (2 * step)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tolerance)
