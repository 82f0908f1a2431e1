"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs depend on a registered
parameter. Operations on constants only are evaluated eagerly and produce
constants, so the same model code serves both plain numpy evaluation and
differentiable evaluation.

    tape = Tape()
    w = tape.param([1.0, 2.0])
    loss = square(w).sum()
    grads = tape.backward(loss)   # {w: array([2., 4.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "const",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "tanh",
    "square",
    "sum",
    "mean",
    "reshape",
    "matmul",
    "affine",
    "gather",
    "pick",
    "softmax_rows",
    "ewma_step",
    "ewma_scan",
    "stop_gradient",
    "grad_check",
]


class Tensor:
    """A dense float64 array, optionally tied to a node on a tape."""

    __slots__ = ("value", "tape", "index", "grad", "name")

    def __init__(self, value, tape: "Tape | None" = None, index: int | None = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def live(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {list(self.shape)}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        kind = "param" if self.tape is not None and self in self.tape.params else ("node" if self.live else "const")
        return f"Tensor({kind}, shape={list(self.shape)})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Ordered record of operations; parents always precede their children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, values, name: str | None = None) -> Tensor:
        arr = _finite_array(values)
        t = Tensor(arr, self, len(self.nodes), name)
        self.nodes.append(_Node((), None))
        self.params.append(t)
        return t

    def release(self) -> None:
        """Drop recorded nodes; breaks tensor/tape reference cycles so memory frees promptly."""
        self.nodes.clear()
        self.params.clear()

    # constants are tape-independent; kept here for symmetry with param()
    @staticmethod
    def const(values) -> Tensor:
        return const(values)

    def _record(self, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(_Node(parents, backward))
        return t

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(root)/d(param) for every registered parameter.

        Gradients start from zero on every call; repeated uses of a parameter
        accumulate additively.
        """
        if root.value.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {list(root.shape)}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if root.tape is self:
            grads[root.index] = np.ones_like(root.value)
        elif root.tape is not None:
            raise ValueError("root tensor belongs to a different tape")
        is_param = {p.index for p in self.params}
        start = root.index if root.tape is self else -1
        for idx in range(start, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or parent.tape is not self:
                    continue
                prev = grads[parent.index]
                grads[parent.index] = pg if prev is None else prev + pg
            if idx not in is_param:
                grads[idx] = None
        out = {}
        for p in self.params:
            g = grads[p.index]
            p.grad = np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
            out[p] = p.grad
        return out


def _finite_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("non-finite value passed as tensor input")
    return arr


def const(values) -> Tensor:
    if isinstance(values, Tensor):
        return values
    return Tensor(_finite_array(values))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(value, parents: tuple[Tensor, ...], backward) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
    if tape is None:
        return Tensor(value)
    return tape._record(value, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.live else None,
                _unbroadcast(g, b.shape) if b.live else None)

    return _result(a.value + b.value, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.live else None,
                _unbroadcast(-g, b.shape) if b.live else None)

    return _result(a.value - b.value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return (_unbroadcast(g * b.value, a.shape) if a.live else None,
                _unbroadcast(g * a.value, b.shape) if b.live else None)

    return _result(a.value * b.value, (a, b), back)


def neg(x) -> Tensor:
    x = _wrap(x)
    return _result(-x.value, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _result(x.value * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = _wrap(x)
    y = np.exp(x.value)
    return _result(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _wrap(x)
    if x.value.size and x.value.min() <= 0.0:
        raise DomainError(f"log of non-positive value (min {x.value.min():.3g})")
    return _result(np.log(x.value), (x,), lambda g: (g / x.value,))


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def square(x) -> Tensor:
    x = _wrap(x)
    return _result(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def stop_gradient(x) -> Tensor:
    return Tensor(_wrap(x).value)


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _wrap(x)
    y = np.sum(x.value, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(y), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = _wrap(x)
    y = np.mean(x.value, axis=axis)
    count = x.value.size // max(np.asarray(y).size, 1)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _result(np.asarray(y), (x,), back)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}") from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- linear algebra

ROW_CHUNK = 128


def rowwise_dot(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x @ W`` whose rows do not depend on how many other rows share the call.

    BLAS picks kernels (and so summation orders) by problem size, which would
    make a row's value depend on its batch. Every product here is issued as
    fixed-size row chunks, zero-padded, so each row sees the same kernel.
    """
    M = x.shape[0]
    x = np.ascontiguousarray(x, dtype=np.float64)
    W = np.ascontiguousarray(W, dtype=np.float64)
    pad = (-M) % ROW_CHUNK
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]))])
    out = np.empty((x.shape[0], W.shape[1]))
    for start in range(0, x.shape[0], ROW_CHUNK):
        np.matmul(x[start:start + ROW_CHUNK], W, out=out[start:start + ROW_CHUNK])
    return out[:M]


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")

    def back(g):
        return (g @ b.value.T if a.live else None,
                a.value.T @ g if b.live else None)

    return _result(rowwise_dot(a.value, b.value), (a, b), back)


def affine(x, W, b) -> Tensor:
    """x @ W + b for a batch of row vectors x."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {list(x.shape)} and {list(W.shape)}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias shape {list(b.shape)} does not match weight shape {list(W.shape)}")

    def back(g):
        return (g @ W.value.T if x.live else None,
                x.value.T @ g if W.live else None,
                g.sum(axis=0) if b.live else None)

    return _result(rowwise_dot(x.value, W.value) + b.value, (x, W, b), back)


# ---------------------------------------------------------------- indexing

def gather(x, index, axis: int = 0) -> Tensor:
    """Index-select along ``axis`` (numpy ``take``); repeated indices accumulate."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.intp)
    size = x.shape[axis]
    if index.size and (index.min() < -size or index.max() >= size):
        raise IndexError(f"gather: index out of range for axis of size {size}")
    y = np.take(x.value, index, axis=axis)

    def back(g):
        if x.value.ndim == 1:
            return (np.bincount(index.reshape(-1) % size, weights=g.reshape(-1), minlength=size),)
        out = np.zeros_like(x.value)
        moved = np.moveaxis(out, axis, 0)
        g_moved = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, g_moved)
        return (out,)

    return _result(y, (x,), back)


def pick(x, index) -> Tensor:
    """Select one entry per row along the last axis: ``y[...] = x[..., index[...]]``."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {list(index.shape)} does not match {list(x.shape)} minus last axis")
    idx = index[..., None]
    y = np.take_along_axis(x.value, idx, axis=-1)[..., 0]

    def back(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _result(y, (x,), back)


# ---------------------------------------------------------------- composite ops

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    x = _wrap(x)
    if x.value.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), back)


def ewma_step(q, u, alpha: float):
    """One exponentially weighted update on raw arrays; the single source of this arithmetic."""
    return (1.0 - alpha) * q + alpha * u


def ewma_scan(u, q0, alpha: float, truncation: int = 0) -> Tensor:
    """Unroll ``q[t] = (1-alpha) q[t-1] + alpha u[t]`` over the leading axis of ``u``.

    ``q0`` broadcasts against ``u.shape[1:]``. With ``truncation=K > 0`` the
    incoming state of every step ``t`` with ``t % K == 0`` (t > 0) is treated
    as a constant by the backward pass; forward values are unaffected.
    """
    u, q0 = _wrap(u), _wrap(q0)
    if u.value.ndim < 1:
        raise ShapeError("ewma_scan needs a leading time axis")
    try:
        np.broadcast_shapes(q0.shape, u.shape[1:])
    except ValueError:
        raise ShapeError(f"ewma_scan: initial state {list(q0.shape)} incompatible with steps {list(u.shape[1:])}") from None
    alpha = float(alpha)
    L = u.shape[0]
    out = np.empty_like(u.value)
    q = np.broadcast_to(q0.value, u.shape[1:])
    for t in range(L):
        q = ewma_step(q, u.value[t], alpha)
        out[t] = q

    def back(g):
        du = np.empty_like(u.value)
        carry = np.zeros(u.shape[1:])
        for t in range(L - 1, -1, -1):
            h = g[t] + carry
            du[t] = alpha * h
            if truncation and t > 0 and t % truncation == 0:
                carry = np.zeros_like(h)
            else:
                carry = (1.0 - alpha) * h
        return (du if u.live else None, _unbroadcast(carry, q0.shape) if q0.live else None)

    return _result(out, (u, q0), back)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    The error for each parameter block is ``max|g_tape - g_fd| / max(|g_tape|, |g_fd|)``
    (both maxima over the checked coordinates, floored at 1e-8 so that an
    all-zero gradient reports 0).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value_at(vals) -> float:
        tape = Tape()
        P = {k: tape.param(v, name=k) for k, v in vals.items()}
        return f(tape, P).item()

    tape = Tape()
    P = {k: tape.param(v, name=k) for k, v in base.items()}
    root = f(tape, P)
    analytic = tape.backward(root)
    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    for name, arr in base.items():
        flat_size = arr.size
        coords = np.arange(flat_size)
        if max_coords is not None and flat_size > max_coords:
            coords = np.sort(rng.choice(flat_size, size=max_coords, replace=False))
        ga = analytic[P[name]].reshape(-1)[coords]
        gn = np.empty(len(coords))
        for j, c in enumerate(coords):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name].reshape(-1)[c] += h
            minus[name].reshape(-1)[c] -= h
            gn[j] = (value_at(plus) - value_at(minus)) / (2.0 * h)
        denom = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0), 1e-8)
        errors[name] = float(np.abs(ga - gn).max(initial=0.0) / denom)
        checked[name] = len(coords)
    return GradCheckReport(errors, tol, checked)
