"""Small reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every :class:`Node` created through it in creation
order, which is a valid topological order, so :func:`backward` is a single
reverse sweep.  Broadcasting is limited to what the encoder and losses
need: a row/column vector (or scalar) added to a matrix, and a leading batch
axis for ``matmul``.
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward", "_tape")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = None
        # weak: a strong Node -> Tape -> Node cycle keeps whole graphs alive until gc runs
        self._tape = weakref.ref(tape) if tape is not None else None

    @property
    def tape(self):
        return self._tape() if self._tape is not None else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the nodes of one computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        # relu pre-activations, consumed by gradcheck to skip kinks
        self.relu_inputs: list[np.ndarray] = []

    def var(self, value) -> Node:
        """A trainable leaf."""
        node = Node(np.array(value, dtype=np.float64), "leaf", (), True, self)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        node = Node(value, "const", (), False, self)
        self.nodes.append(node)
        return node

    def _record(self, value, op, parents, backward):
        parents = tuple(parents)
        req = any(p.requires_grad for p in parents)
        node = Node(value, op, parents, req, self)
        if req:
            node._backward = backward
        self.nodes.append(node)
        return node


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node) and x.tape is not None:
            return x.tape
    raise ValueError("operation needs at least one Node bound to a tape")


def _as_node(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        return x
    return tape.const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None
    # only vectors/scalars may be stretched, never a full operand
    if out != sa and out != sb:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _accumulate(node: Node, g: np.ndarray):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad = node.grad + g


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return tape._record(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return tape._record(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Node:
    """Elementwise product (with vector broadcasting)."""
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g * bv, a.shape))
        _accumulate(b, _unbroadcast(g * av, b.shape))

    return tape._record(av * bv, "mul", (a, b), bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return a.tape._record(a.value * c, "scale", (a,), bw)


def matmul(a, b) -> Node:
    """``a @ b`` for 2-D operands, or batched (B, n, m) @ (B, m, k)."""
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    av, bv = a.value, b.value
    if av.ndim not in (2, 3) or av.ndim != bv.ndim:
        raise ShapeError(f"matmul: unsupported ranks {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {av.shape} @ {bv.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(av, -1, -2) @ g)

    return tape._record(av @ bv, "matmul", (a, b), bw)


def transpose(a: Node) -> Node:
    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return a.tape._record(np.swapaxes(a.value, -1, -2), "transpose", (a,), bw)


def relu(a: Node) -> Node:
    a.tape.relu_inputs.append(a.value)
    mask = a.value > 0  # derivative 0 at the kink

    def bw(g):
        _accumulate(a, g * mask)

    # NaN inputs stay NaN so divergence is not masked
    return a.tape._record(np.where(a.value <= 0, 0.0, a.value), "relu", (a,), bw)


def row_l2_normalize(a: Node, allow_zero: bool = False) -> Node:
    """Normalize along the last axis.

    Zero rows raise unless ``allow_zero``; then they stay zero and pass no
    gradient.
    """
    x = a.value
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    zero = norm == 0.0
    if np.any(zero) and not allow_zero:
        raise FloatingPointError("row_l2_normalize: zero row")
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x / safe)

    def bw(g):
        # d(x/|x|) = (g - y (y.g)) / |x|
        proj = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(a, np.where(zero, 0.0, (g - y * proj) / safe))

    return a.tape._record(y, "row_l2_normalize", (a,), bw)


def reduce_sum(a: Node, axis=None) -> Node:
    shape = a.shape

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), shape))

    return a.tape._record(np.sum(a.value, axis=axis), "sum", (a,), bw)


def mean(a: Node, axis=None) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def dot(a, b) -> Node:
    """Inner product along the last axis; scalar for two vectors."""
    return reduce_sum(mul(a, b), axis=-1)


def log_sum_exp(a: Node, axis: int = -1) -> Node:
    """Stabilized ``log(sum(exp(a)))`` along ``axis``."""
    x = a.value
    shift = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - shift)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + shift, axis=axis)
    soft = e / s

    def bw(g):
        _accumulate(a, np.expand_dims(g, axis) * soft)

    return a.tape._record(out, "log_sum_exp", (a,), bw)


def reshape(a: Node, shape) -> Node:
    old = a.shape

    def bw(g):
        _accumulate(a, g.reshape(old))

    return a.tape._record(a.value.reshape(shape), "reshape", (a,), bw)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_as_node(n, tape) for n in nodes]
    vals = [n.value for n in nodes]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for n, part in zip(nodes, np.split(g, splits, axis=axis)):
            _accumulate(n, part)

    return tape._record(np.concatenate(vals, axis=axis), "concat", nodes, bw)


def expand_dims(a: Node, axis: int) -> Node:
    def bw(g):
        _accumulate(a, np.squeeze(g, axis=axis))

    return a.tape._record(np.expand_dims(a.value, axis), "expand_dims", (a,), bw)


def detach(a: Node) -> Node:
    """Stop-gradient: same value, no path back to ``a``."""
    return a.tape.const(a.value.copy())


# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from ``loss``."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.value)
    idx = {id(n): i for i, n in enumerate(tape.nodes)}
    stop = idx[id(loss)]
    for node in reversed(tape.nodes[: stop + 1]):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in tape.nodes:
        if node.requires_grad and node.op == "leaf" and node.grad is None:
            node.grad = np.zeros_like(node.value)


def gradcheck(
    build: Callable[[Tape, list[Node]], Node],
    params: Sequence[np.ndarray],
    h: float = 1e-4,
) -> float:
    """Max relative error between backprop and central differences.

    ``build(tape, leaves)`` must construct the scalar loss from the leaves.
    Coordinates whose +h / -h evaluations flip any relu mask are skipped,
    since the finite difference straddles a kink there.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.var(p) for p in params]
    loss = build(tape, leaves)
    backward(tape, loss)
    analytic = [leaf.grad for leaf in leaves]

    def evaluate(values):
        t = Tape()
        out = build(t, [t.var(v) for v in values])
        masks = [r > 0 for r in t.relu_inputs]
        return float(out.value), masks

    worst = 0.0
    for pi, p in enumerate(params):
        for flat in range(p.size):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[pi].flat[flat] += h
            minus[pi].flat[flat] -= h
            fp, mp = evaluate(plus)
            fm, mm = evaluate(minus)
            if any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                continue
            numeric = (fp - fm) / (2.0 * h)
            an = float(analytic[pi].flat[flat])
            err = abs(an - numeric) / max(1e-8, abs(an) + abs(numeric))
            worst = max(worst, err)
    return worst
