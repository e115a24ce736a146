"""Reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations needed by the models in this package are provided:
affine maps, pointwise nonlinearities, elementwise arithmetic, reductions,
gathers, and segment sums. A fresh graph is built for every loss
evaluation and discarded after ``backward``, so memory stays bounded by a
single evaluation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Var",
    "Parameter",
    "backward",
    "constant",
    "affine",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "sigmoid",
    "tanh",
    "softplus",
    "log",
    "vsum",
    "concat",
    "slice_cols",
    "gather_rows",
    "take_pairs",
    "segment_sum",
    "sigmoid_array",
    "softplus_array",
]


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def sigmoid_array(x) -> np.ndarray:
    """Stable logistic function on arrays; sigmoid_array(0.0) == 0.5 exactly."""
    x = _f64(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out[0] if scalar else out


def softplus_array(x) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, _f64(x))


class Var:
    """A node in the computation graph: a value plus how to backpropagate."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = _f64(value)
        self._parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = requires_grad or any(
            p.requires_grad for p in self._parents
        )
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Var):
    """Leaf variable with a persistent gradient slot."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def constant(x) -> Var:
    return Var(x)


def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into every reachable Parameter's grad.

    The root must be a scalar. Gradients add onto whatever is already in
    the slots, so call ``zero_grad`` between evaluations.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")

    # Iterative post-order DFS over the parent DAG; parents land before
    # consumers, so the reversed order is a valid backprop schedule.
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += g
        if not isinstance(node, Parameter):
            node.grad = None  # free intermediate buffers early


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast when producing it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def affine(x: Var, weights: Var, bias: Var) -> Var:
    """weights @ x + bias for a vector x, or x @ weights.T + bias row-wise.

    ``weights`` has shape (out, in); ``bias`` has shape (out,).
    """
    W, b = weights.value, bias.value
    if W.ndim != 2:
        raise ShapeError(f"weights must be a matrix, got shape {W.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match output size {W.shape[0]}")
    if x.value.ndim not in (1, 2) or x.value.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"input shape {x.value.shape} does not match weight columns {W.shape[1]}"
        )
    if x.value.ndim == 1:
        out = W @ x.value + b

        def vjp(g):
            gx = g @ W if x.requires_grad else None
            gW = np.outer(g, x.value) if weights.requires_grad else None
            gb = g.copy() if bias.requires_grad else None
            return gx, gW, gb

    else:
        out = x.value @ W.T + b

        def vjp(g):
            gx = g @ W if x.requires_grad else None
            gW = g.T @ x.value if weights.requires_grad else None
            gb = g.sum(axis=0) if bias.requires_grad else None
            return gx, gW, gb

    return Var(out, (x, weights, bias), vjp)


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(out, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Var(out, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    out = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(out, (a, b), vjp)


def scale(a: Var, s: float) -> Var:
    return Var(a.value * s, (a,), lambda g: (g * s,))


def shift(a: Var, s: float) -> Var:
    return Var(a.value + s, (a,), lambda g: (g,))


def neg(a: Var) -> Var:
    return scale(a, -1.0)


def sigmoid(a: Var) -> Var:
    s = sigmoid_array(a.value)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a: Var) -> Var:
    out = softplus_array(a.value)
    return Var(out, (a,), lambda g: (g * sigmoid_array(a.value),))


def log(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def vsum(a: Var, axis=None) -> Var:
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.value.shape).copy(),)

    return Var(out, (a,), vjp)


def concat(parts: Sequence[Var], axis: int = 1) -> Var:
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Var(out, tuple(parts), vjp)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    out = a.value[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return (full,)

    return Var(out, (a,), vjp)


def gather_rows(table: Var, idx: np.ndarray) -> Var:
    """Select rows of a 2-d table; duplicate indices accumulate in reverse."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.value[idx]

    def vjp(g):
        if not table.requires_grad:
            return (None,)
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        return (full,)

    return Var(out, (table,), vjp)


def take_pairs(m: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
    """Select m[rows[k], cols[k]] for each k as a flat vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = m.value[rows, cols]

    def vjp(g):
        full = np.zeros_like(m.value)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return Var(out, (m,), vjp)


def segment_sum(x: Var, seg: np.ndarray, n_segments: int) -> Var:
    """Sum rows of x into n_segments buckets given by seg ids."""
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n_segments, x.value.shape[1]), dtype=np.float64)
    np.add.at(out, seg, x.value)

    def vjp(g):
        return (g[seg],)

    return Var(out, (x,), vjp)
