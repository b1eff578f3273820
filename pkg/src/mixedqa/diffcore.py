"""A small reverse-mode differentiation engine over float64 numpy arrays.

Every operation builds a :class:`Node` holding its value, its parents and a
closure that maps the output gradient to parent gradients. ``backward`` walks
the graph once in reverse topological order.

Shapes are explicit: binary elementwise ops accept equal shapes or a scalar
operand, nothing else. Bias rows are added with :func:`add_row`.

Masked log-probabilities are stored as ``NEG_INF`` (-1e30) rather than -inf so
that downstream arithmetic stays finite.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -1e30


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EmptySupportError(ValueError):
    pass


class Node:
    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "op")

    def __init__(self, value, parents: tuple = (), grad_fn: Callable | None = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def constant(value) -> Node:
    return Node(np.array(value, dtype=np.float64))


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, op="param")


def _make(value, parents, grad_fn, op) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents if needs else (), grad_fn if needs else None, needs, op)


def _check_pair(a: Node, b: Node, op: str):
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_pair(a, b, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Node, b: Node) -> Node:
    _check_pair(a, b, "sub")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Node, b: Node) -> Node:
    _check_pair(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
                 "mul")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Node) -> Node:
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive value")
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def clamp_min(a: Node, floor: float) -> Node:
    """max(a, floor); no gradient where the floor is active."""
    keep = a.value >= floor
    return _make(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,), "clamp_min")


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul,
    "tanh": tanh, "relu": relu, "exp": exp, "log": log, "square": square,
}


def elementwise(a: Node, op: str, b: Node | None = None) -> Node:
    fn = ELEMENTWISE[op]
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ----------------------------------------------------------------------------
# linear algebra and reshaping
# ----------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add_row(a: Node, row: Node) -> Node:
    """Add a length-d vector to every row of an n x d matrix."""
    if a.value.ndim != 2 or row.shape != (a.shape[1],):
        raise ShapeError(f"add_row: {a.shape} and {row.shape}")
    return _make(a.value + row.value, (a, row), lambda g: (g, g.sum(axis=0)), "add_row")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat_cols(parts: Sequence[Node]) -> Node:
    widths = [p.shape[1] for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError("concat_cols: row counts differ")
    cuts = np.cumsum(widths)[:-1]
    return _make(np.concatenate([p.value for p in parts], axis=1), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=1)), "concat")


def take_rows(table: Node, idx) -> Node:
    """Row gather ``table[idx]``; gradients are scatter-added back."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.value[idx], (table,), grad, "take_rows")


def take(a: Node, idx) -> Node:
    """Gather elements of ``a`` by flat (row-major) index."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    size = a.value.size

    def grad(g):
        out = np.zeros(size)
        np.add.at(out, idx.ravel(), np.asarray(g).ravel())
        return (out.reshape(shape),)

    return _make(a.value.ravel()[idx], (a,), grad, "take")


def total(a: Node) -> Node:
    shape = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Node) -> Node:
    return scale(total(a), 1.0 / a.value.size)


def sum_rows(a: Node) -> Node:
    """Sum a 2-d node along its last axis."""
    n = a.shape[1]
    return _make(a.value.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], n, axis=1),),
                 "sum_rows")


def cumsum_rows(a: Node) -> Node:
    """Inclusive prefix sum along the last axis."""
    return _make(np.cumsum(a.value, axis=-1), (a,),
                 lambda g: (np.cumsum(g[..., ::-1], axis=-1)[..., ::-1],), "cumsum")


def detach(a: Node) -> Node:
    return Node(a.value.copy(), op="detach")


# ----------------------------------------------------------------------------
# distributions and pooling
# ----------------------------------------------------------------------------

def log_softmax(scores: Node, mask=None) -> Node:
    """Log-softmax over the last axis restricted to ``mask``.

    Masked positions get ``NEG_INF`` and receive no gradient. Raises
    :class:`EmptySupportError` if a row has no unmasked position.
    """
    s = scores.value
    mask = np.ones(s.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise ShapeError(f"log_softmax: mask {mask.shape} vs scores {s.shape}")
    if not np.all(mask.any(axis=-1)):
        raise EmptySupportError("log_softmax: every position masked")
    shifted = np.where(mask, s, -np.inf)
    top = shifted.max(axis=-1, keepdims=True)
    z = np.where(mask, np.exp(shifted - top), 0.0)
    lse = np.log(z.sum(axis=-1, keepdims=True)) + top
    out = np.where(mask, s - lse, NEG_INF)
    probs = np.where(mask, np.exp(out), 0.0)

    def grad(g):
        gm = np.where(mask, g, 0.0)
        return (gm - probs * gm.sum(axis=-1, keepdims=True),)

    return _make(out, (scores,), grad, "log_softmax")


def segment_max(h: Node, segments, num_segments: int) -> Node:
    """Columnwise max of the rows of ``h`` grouped by segment id.

    Rows with a negative segment id are ignored; empty segments yield zeros.
    Each column's gradient goes to its argmax row, the lowest row index on ties.
    """
    hv = h.value
    if hv.ndim != 2:
        raise ShapeError("segment_max expects a matrix")
    seg = np.asarray(segments, dtype=np.int64)
    out = np.full((num_segments, hv.shape[1]), -np.inf)
    live = seg >= 0
    np.maximum.at(out, seg[live], hv[live])
    out[np.isneginf(out)] = 0.0
    # winner = first row attaining the max within its segment, per column
    rows = np.nonzero(live)[0]
    hit = hv[rows] == out[seg[rows]]
    ncol = hv.shape[1]
    ri, ci = np.nonzero(hit)  # row-major, so rows ascend within each key
    keys, first = np.unique(seg[rows[ri]] * ncol + ci, return_index=True)
    arg = np.full(num_segments * ncol, -1, dtype=np.int64)
    arg[keys] = rows[ri[first]]
    arg = arg.reshape(num_segments, ncol)
    cols = np.broadcast_to(np.arange(ncol), arg.shape)
    valid = arg >= 0

    def grad(g):
        gh = np.zeros_like(hv)
        np.add.at(gh, (arg[valid], cols[valid]), g[valid])
        return (gh,)

    return _make(out, (h,), grad, "segment_max")


def max_pool_rows(h: Node) -> Node:
    if h.value.ndim != 2 or h.shape[0] < 1:
        raise ShapeError("max_pool_rows needs at least one row")
    pooled = segment_max(h, np.zeros(h.shape[0], dtype=np.int64), 1)
    return reshape(pooled, (h.shape[1],))


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------

def _topo(root: Node) -> list[Node]:
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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, params: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from each trainable leaf (or each node in ``params``) to its
    gradient. Leaves the loss does not reach get zeros.
    """
    if loss.value.shape not in ((), (1,)):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    order = _topo(loss)
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    if params is None:
        params = [n for n in order if n.requires_grad and not n.parents]
    return {p: grads.get(id(p), np.zeros_like(p.value)).reshape(p.shape) for p in params}
