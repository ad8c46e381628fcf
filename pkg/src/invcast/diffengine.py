"""Small reverse-mode differentiation engine over numpy arrays.

A :class:`Tape` records every operation applied to :class:`DiffValue` nodes in
creation order, which is already a topological order, so the backward pass is
a single reverse sweep.

Every op also accepts plain numbers / ndarrays.  When none of the inputs is a
``DiffValue`` the op just returns the numpy result, so the same code path can
be evaluated with or without a tape (the finite-difference tests rely on this).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


class DiffValue:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "_grad")

    def __init__(self, value, tape: "Tape", index: int, parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return self.vjp is None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"DiffValue(shape={self.value.shape}, index={self.index})"

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[DiffValue] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> DiffValue:
        arr = np.array(value, dtype=np.float64)
        node = DiffValue(arr, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def record(self, value, parents: Sequence[DiffValue], vjp: Callable) -> DiffValue:
        node = DiffValue(np.asarray(value, dtype=np.float64), self, len(self.nodes),
                         tuple(parents), vjp)
        self.nodes.append(node)
        return node

    def backward(self, root: DiffValue):
        """Accumulate d(root)/d(node) into ``.grad`` of every node reachable from root.

        Gradients accumulate across calls; call :meth:`zero_grad` to reset.
        """
        if root.tape is not self:
            raise ContractViolation("root was recorded on a different tape")
        if root.value.size != 1:
            raise ContractViolation(f"backward needs a scalar root, got shape {root.value.shape}")
        adjoint: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            g = adjoint.pop(node.index, None)
            if g is None:
                continue
            node._grad = g.copy() if node._grad is None else node._grad + g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, DiffValue):
                    continue
                prev = adjoint.get(parent.index)
                adjoint[parent.index] = pg if prev is None else prev + pg

    def zero_grad(self):
        for node in self.nodes:
            node._grad = None


def backward(root: DiffValue):
    root.tape.backward(root)


def value_of(x) -> np.ndarray:
    if isinstance(x, DiffValue):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, DiffValue):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractViolation("operands recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("add", av, bv)
    tape = _tape_of(a, b)
    out = av + bv
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("sub", av, bv)
    tape = _tape_of(a, b)
    out = av - bv
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("mul", av, bv)
    tape = _tape_of(a, b)
    out = av * bv
    if tape is None:
        return out
    return tape.record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("div", av, bv)
    tape = _tape_of(a, b)
    out = av / bv
    if tape is None:
        return out
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a):
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return -av
    return tape.record(-av, (a,), lambda g: (-g,))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    tape = _tape_of(a, b)
    out = av @ bv
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


# -- elementwise unary ----------------------------------------------------


def _unary(a, fwd, dfn):
    av = value_of(a)
    tape = _tape_of(a)
    out = fwd(av)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g * dfn(av, out),))


def relu(a):
    # derivative at 0 is taken as 0
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def sigmoid(a):
    def fwd(x):
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def wrapped(x):
        x = np.asarray(x, dtype=np.float64)
        return fwd(x.reshape(-1)).reshape(x.shape)

    return _unary(a, wrapped, lambda x, y: y * (1.0 - y))


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def abs(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def sqrt(a):
    """Square root whose derivative at 0 is taken as 0 instead of +inf."""

    def d(x, y):
        safe = np.where(y > 0, y, 1.0)
        return np.where(y > 0, 0.5 / safe, 0.0)

    return _unary(a, np.sqrt, d)


# -- reductions -----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    av = value_of(a)
    axes = _norm_axis(axis, av.ndim)
    tape = _tape_of(a)
    out = av.sum(axis=axes, keepdims=keepdims)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (_expand(g, av.shape, axes, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    axes = _norm_axis(axis, av.ndim)
    n = int(np.prod([av.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ContractViolation(f"mean over empty axes {axes} of shape {av.shape}")
    tape = _tape_of(a)
    out = av.sum(axis=axes, keepdims=keepdims) / n
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (_expand(g, av.shape, axes, keepdims) / n,))


def var(a, axis=None, keepdims=False):
    """Population variance (divides by the count)."""
    av = value_of(a)
    axes = _norm_axis(axis, av.ndim)
    n = int(np.prod([av.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ContractViolation(f"var over empty axes {axes} of shape {av.shape}")
    centered = av - av.sum(axis=axes, keepdims=True) / n
    out = (centered * centered).sum(axis=axes, keepdims=keepdims) / n
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(
        out, (a,), lambda g: (_expand(g, av.shape, axes, keepdims) * (2.0 / n) * centered,)
    )


def cumsum(a, axis):
    av = value_of(a)
    tape = _tape_of(a)
    out = np.cumsum(av, axis=axis)
    if tape is None:
        return out

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return tape.record(out, (a,), vjp)


# -- structural -----------------------------------------------------------


def take(a, key):
    """Basic or advanced indexing, ``a[key]``."""
    av = value_of(a)
    tape = _tape_of(a)
    out = av[key]
    if tape is None:
        return np.array(out, dtype=np.float64)

    basic = all(
        isinstance(k, (slice, int, np.integer)) or k is Ellipsis
        for k in (key if isinstance(key, tuple) else (key,))
    )

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return tape.record(np.array(out, dtype=np.float64), (a,), vjp)


def reshape(a, shape):
    av = value_of(a)
    tape = _tape_of(a)
    out = av.reshape(shape)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g.reshape(av.shape),))


def concat(xs, axis=0):
    vals = [value_of(x) for x in xs]
    ref = vals[0]
    ax = axis % ref.ndim
    for v in vals[1:]:
        if v.ndim != ref.ndim or any(
            v.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ContractViolation(f"concat: incompatible shapes {ref.shape} and {v.shape}")
    tape = _tape_of(*xs)
    out = np.concatenate(vals, axis=ax)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return tape.record(out, tuple(xs), vjp)


def stack(xs, axis=0):
    expanded = []
    for x in xs:
        shape = list(value_of(x).shape)
        ax = axis % (len(shape) + 1)
        shape.insert(ax, 1)
        expanded.append(reshape(x, tuple(shape)))
    return concat(expanded, axis=axis)


def embed_lookup(table, indices):
    """Row lookup ``table[indices]`` for integer ``indices`` of any shape."""
    tv = value_of(table)
    idx = np.asarray(indices)
    if tv.ndim != 2:
        raise ContractViolation(f"embed_lookup: table must be 2-D, got {tv.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise ContractViolation(f"embed_lookup: index out of range for table {tv.shape}")
    return take(table, idx)
