"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations (add, mul, matmul, activations,
reductions, slicing) as they execute on :class:`Var` handles.  Calling
``tape.backward(loss)`` on a scalar output propagates cotangents to every
leaf in a fixed reverse order, so replaying the same computation with the
same inputs is bit-identical.

Tapes are single-use, single-threaded objects: build the graph, run one
backward pass, read gradients, discard.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class DetachedLossError(ValueError):
    """Raised when a gradient is requested for a value with no tape history."""


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.tape.values[self.idx].shape

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Var(idx={self.idx}, shape={self.shape})"


class Tape:
    """Append-only record of a computation, with one backward pass."""

    def __init__(self):
        self.values: list[Array] = []
        self.edges: list[tuple] = []
        self.cotangents: list[Array | None] | None = None

    def leaf(self, value) -> Var:
        """Register a differentiable input (parameters, particle positions)."""
        return self._record(np.asarray(value, dtype=np.float64), ())

    def _record(self, value: Array, edges: tuple) -> Var:
        self.values.append(value)
        self.edges.append(edges)
        return Var(self, len(self.values) - 1)

    def backward(self, root: Var) -> None:
        """Propagate cotangents from a scalar ``root`` back to all leaves."""
        if root.tape is not self:
            raise DetachedLossError("loss was not produced on this tape")
        rv = self.values[root.idx]
        if rv.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {rv.shape}")
        cot: list[Array | None] = [None] * len(self.values)
        cot[root.idx] = np.ones_like(rv)
        for i in range(root.idx, -1, -1):
            c = cot[i]
            if c is None:
                continue
            for parent, vjp in self.edges[i]:
                g = vjp(c)
                prev = cot[parent]
                cot[parent] = g if prev is None else prev + g
        self.cotangents = cot

    def grad(self, v: Var) -> Array:
        """Gradient of the last backward root with respect to ``v``."""
        if self.cotangents is None:
            raise DetachedLossError("backward() has not been run on this tape")
        g = self.cotangents[v.idx]
        if g is None:
            return np.zeros_like(self.values[v.idx])
        return g


def _value(x) -> Array:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _edges(pairs) -> tuple:
    return tuple((x.idx, vjp) for x, vjp in pairs if isinstance(x, Var))


def _ident(g):
    return g


def add(a, b) -> Var:
    tb = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av + bv
    same = av.shape == bv.shape == out.shape
    return tb._record(out, _edges([
        (a, _ident if same else lambda g, s=av.shape: _unbroadcast(g, s)),
        (b, _ident if same else lambda g, s=bv.shape: _unbroadcast(g, s)),
    ]))


def _neg_ident(g):
    return -g


def sub(a, b) -> Var:
    tb = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av - bv
    same = av.shape == bv.shape == out.shape
    return tb._record(out, _edges([
        (a, _ident if same else lambda g, s=av.shape: _unbroadcast(g, s)),
        (b, _neg_ident if same else lambda g, s=bv.shape: _unbroadcast(-g, s)),
    ]))


def mul(a, b) -> Var:
    tb = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av * bv
    same = av.shape == bv.shape == out.shape
    return tb._record(out, _edges([
        (a, (lambda g, o=bv: g * o) if same
            else lambda g, o=bv, s=av.shape: _unbroadcast(g * o, s)),
        (b, (lambda g, o=av: g * o) if same
            else lambda g, o=av, s=bv.shape: _unbroadcast(g * o, s)),
    ]))


def affine(h, w, b) -> Var:
    """Fused ``h @ w + b`` (bias broadcast over rows)."""
    tb = _tape_of(h, w, b)
    hv, wv, bv = _value(h), _value(w), _value(b)
    out = hv @ wv + bv
    return tb._record(out, _edges([
        (h, lambda g, o=wv: g @ o.T),
        (w, lambda g, o=hv: o.T @ g),
        (b, lambda g: g.sum(axis=0)),
    ]))


def neg(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    return tb._record(-av, _edges([(a, lambda g: -g)]))


def matmul(a, b) -> Var:
    tb = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av @ bv
    return tb._record(out, _edges([
        (a, lambda g, o=bv: g @ o.T),
        (b, lambda g, o=av: o.T @ g),
    ]))


def transpose(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    return tb._record(av.T, _edges([(a, lambda g: g.T)]))


def tanh(a) -> Var:
    tb = _tape_of(a)
    out = np.tanh(_value(a))
    return tb._record(out, _edges([(a, lambda g, o=out: g * (1.0 - o * o))]))


def sigmoid(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return tb._record(out, _edges([(a, lambda g, o=out: g * o * (1.0 - o))]))


def _softplus(x: Array) -> Array:
    # max(x, 0) + log1p(exp(-|x|)), stable and faster than logaddexp
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    out = _softplus(av)
    # sigmoid(a) = 1 - exp(-softplus(a)), stable since out >= 0
    return tb._record(out, _edges([(a, lambda g, o=out: g * (1.0 - np.exp(-o)))]))


def relu(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    out = np.maximum(av, 0.0)
    return tb._record(out, _edges([(a, lambda g, m=(av > 0.0): g * m)]))


def vexp(a) -> Var:
    tb = _tape_of(a)
    out = np.exp(_value(a))
    return tb._record(out, _edges([(a, lambda g, o=out: g * o)]))


def square(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    return tb._record(av * av, _edges([(a, lambda g, o=av: 2.0 * g * o)]))


def reciprocal(a) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    out = 1.0 / av
    return tb._record(out, _edges([(a, lambda g, o=out: -g * o * o)]))


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    tb = _tape_of(a)
    av = _value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=av.shape, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return tb._record(np.asarray(out, dtype=np.float64), _edges([(a, vjp)]))


def vmean(a, axis=None) -> Var:
    av = _value(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def cols(a, j0: int, j1: int) -> Var:
    """Column slice ``a[:, j0:j1]`` of a 2-D array."""
    tb = _tape_of(a)
    av = _value(a)
    out = av[:, j0:j1]

    def vjp(g, shape=av.shape, j0=j0, j1=j1):
        full = np.zeros(shape)
        full[:, j0:j1] = g
        return full

    return tb._record(out, _edges([(a, vjp)]))


def rows(a, i0: int, i1: int) -> Var:
    """Row slice ``a[i0:i1]`` of a 2-D array."""
    tb = _tape_of(a)
    av = _value(a)
    out = av[i0:i1]

    def vjp(g, shape=av.shape, i0=i0, i1=i1):
        full = np.zeros(shape)
        full[i0:i1] = g
        return full

    return tb._record(out, _edges([(a, vjp)]))


def concat_cols(a, b) -> Var:
    tb = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = np.concatenate([av, bv], axis=1)
    na = av.shape[1]
    return tb._record(out, _edges([
        (a, lambda g, na=na: g[:, :na]),
        (b, lambda g, na=na: g[:, na:]),
    ]))


def segment(a, offset: int, shape: tuple) -> Var:
    """Reshaped slice of a flat vector (used to view weight matrices)."""
    tb = _tape_of(a)
    av = _value(a)
    size = int(np.prod(shape))
    out = av[offset:offset + size].reshape(shape)

    def vjp(g, n=av.shape[0], offset=offset, size=size):
        full = np.zeros(n)
        full[offset:offset + size] = g.ravel()
        return full

    return tb._record(out, _edges([(a, vjp)]))


def numeric_gradient(f: Callable[[Array], float], x: Array, h: float = 1e-4) -> Array:
    """Central finite differences of a scalar function, the gradient oracle."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
