"""Reverse-mode autodiff over numpy arrays with differentiable backward passes.

Every vector-Jacobian product is written in terms of the same primitive ops, so
``grad(..., create_graph=True)`` returns nodes that can themselves be
differentiated. That is what lets the white-box attack back-propagate through
an unrolled unlearning update.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NonFiniteError(FloatingPointError):
    """Raised eagerly as soon as an op produces NaN or Inf."""

    def __init__(self, op: str, shape: tuple[int, ...]):
        self.op = op
        self.shape = shape
        super().__init__(f"{op} produced non-finite values (output shape {shape})")


class GradError(ValueError):
    pass


def _graph_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_graph():
    """Evaluate ops without recording parents (values only)."""
    prev = _graph_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("id", "value", "op", "parents", "vjp", "requires_grad")

    def __init__(self, value, op: str = "const", parents: tuple["Node", ...] = (),
                 vjp: Callable | None = None, requires_grad: bool = False):
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        self.id = next(_ids)
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def variable(value) -> Node:
    """Leaf node that participates in differentiation."""
    return Node(np.array(value, dtype=np.float64), op="leaf", requires_grad=True)


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(op: str, value: np.ndarray, parents: tuple[Node, ...], vjp: Callable) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, np.shape(value))
    if _graph_enabled() and any(p.requires_grad for p in parents):
        return Node(value, op, parents, vjp, requires_grad=True)
    return Node(value, op)


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(op, a, b) from None


def sum_to(x, shape: tuple[int, ...]) -> Node:
    """Reduce a broadcast result back to ``shape``."""
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    value = x.value.sum(axis=axes, keepdims=True)
    if lead:
        value = value.reshape(value.shape[lead:])
    in_shape = x.shape
    return _make("sum_to", value.reshape(shape), (x,),
                 lambda g: (broadcast_to(g, in_shape),))


def broadcast_to(x, shape: tuple[int, ...]) -> Node:
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        value = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    in_shape = x.shape
    return _make("broadcast_to", value, (x,), lambda g: (sum_to(g, in_shape),))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (sum_to(g, sa), neg(sum_to(g, sb))))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _make("mul", a.value * b.value, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value

    def vjp(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make("div", value, (a, b), vjp)


def neg(a) -> Node:
    a = as_node(a)
    return _make("neg", -a.value, (a,), lambda g: (neg(g),))


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make("scale", a.value * c, (a,), lambda g: (scale(g, c),))


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out: Node

    def vjp(g):
        return (mul(g, out),)

    out = _make("exp", value, (a,), vjp)
    return out


def log(a) -> Node:
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make("log", value, (a,), lambda g: (div(g, a),))


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    out: Node

    def vjp(g):
        return (div(g, scale(out, 2.0)),)

    out = _make("sqrt", value, (a,), vjp)
    return out


def square(a) -> Node:
    a = as_node(a)
    return _make("square", a.value * a.value, (a,), lambda g: (mul(g, scale(a, 2.0)),))


def tanh(a) -> Node:
    a = as_node(a)
    out: Node

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make("tanh", np.tanh(a.value), (a,), vjp)
    return out


def relu(a) -> Node:
    a = as_node(a)
    mask = Node((a.value > 0).astype(np.float64))
    return _make("relu", a.value * mask.value, (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.value @ b.value, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Node:
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.value.T.copy(), (a,), lambda g: (transpose(g),))


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    in_shape = a.shape
    return _make("reshape", value, (a,), lambda g: (reshape(g, in_shape),))


def take_rows(a, idx) -> Node:
    """Select rows ``a[idx]`` of a 2-D node."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _make("take_rows", a.value[idx], (a,), lambda g: (scatter_rows(g, idx, n),))


def scatter_rows(g, idx, n: int) -> Node:
    """Adjoint of take_rows: add rows of ``g`` into a zero array with ``n`` rows."""
    g = as_node(g)
    idx = np.asarray(idx, dtype=np.int64)
    value = np.zeros((n,) + g.shape[1:])
    np.add.at(value, idx, g.value)
    return _make("scatter_rows", value, (g,), lambda h: (take_rows(h, idx),))


def flat_slice(a, start: int, stop: int, shape: Sequence[int]) -> Node:
    """View ``a[start:stop]`` of a 1-D node reshaped to ``shape``."""
    a = as_node(a)
    shape = tuple(shape)
    if a.ndim != 1 or stop > a.shape[0] or int(np.prod(shape)) != stop - start:
        raise ShapeError("flat_slice", a.shape, shape)
    n = a.shape[0]
    value = a.value[start:stop].reshape(shape)

    def vjp(g):
        return (_flat_embed(g, start, n),)

    return _make("flat_slice", value, (a,), vjp)


def _flat_embed(g, start: int, n: int) -> Node:
    g = as_node(g)
    value = np.zeros(n)
    stop = start + g.value.size
    value[start:stop] = g.value.ravel()
    shape = g.shape
    return _make("flat_embed", value, (g,), lambda h: (flat_slice(h, start, stop, shape),))


def concat_flat(parts: Sequence[Node]) -> Node:
    """Ravel and concatenate nodes into one 1-D node."""
    parts = [as_node(p) for p in parts]
    shapes = [p.shape for p in parts]
    sizes = [p.value.size for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    value = np.concatenate([p.value.ravel() for p in parts]) if parts else np.zeros(0)

    def vjp(g):
        return tuple(flat_slice(g, offsets[i], offsets[i + 1], shapes[i])
                     for i in range(len(parts)))

    return _make("concat_flat", value, tuple(parts), vjp)


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            kshape = list(in_shape)
            kshape[axis] = 1
            g = reshape(g, kshape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(in_shape))
        return (broadcast_to(g, in_shape),)

    return _make("sum", value, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm(a) -> Node:
    return sqrt(sum(square(a)))


# ---------------------------------------------------------------- probability

def log_softmax(a) -> Node:
    """Row-wise log-softmax over the last axis, stabilized by max-subtraction."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out: Node

    def vjp(g):
        probs = exp(out)
        return (sub(g, mul(probs, sum(g, axis=-1, keepdims=True))),)

    out = _make("log_softmax", value, (a,), vjp)
    return out


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= k)):
        raise ValueError(f"labels must be 1-D class indices in [0, {k})")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_node(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    targets = Node(one_hot(labels, logits.shape[1]))
    return neg(mean(sum(mul(targets, log_softmax(logits)), axis=1)))


def kl_divergence(p_logits, q_logits) -> Node:
    """Batch-mean KL(p || q) between row-wise softmax distributions."""
    p_logits, q_logits = as_node(p_logits), as_node(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeError("kl_divergence", p_logits.shape, q_logits.shape)
    log_p = log_softmax(p_logits)
    log_q = log_softmax(q_logits)
    return mean(sum(mul(exp(log_p), sub(log_p, log_q)), axis=-1))


# ---------------------------------------------------------------- differentiation

def _topo_order(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def grad(output: Node, wrt: Sequence[Node], create_graph: bool = False,
         allow_unused: bool = False) -> list[Node]:
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the returned nodes carry their own graph and can
    be differentiated again (reverse-over-reverse).
    """
    if output.value.size != 1:
        raise GradError(f"grad requires a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise GradError(f"wrt node {w!r} does not require grad")
    if not output.requires_grad:
        if allow_unused:
            return [Node(np.zeros(w.shape)) for w in wrt]
        raise GradError("output does not depend on any wrt node")

    keep = {w.id for w in wrt}
    # only nodes that depend on some wrt node carry a useful cotangent
    order, needed = [], set()
    for node in _topo_order(output):
        if node.id in keep or any(p.id in needed for p in node.parents):
            needed.add(node.id)
            order.append(node)
    cot: dict[int, Node] = {output.id: Node(np.ones(output.shape))}
    ctx = _nullctx() if create_graph else no_graph()
    with ctx:
        for node in reversed(order):
            g = cot.get(node.id)
            if g is None or node.vjp is None:
                continue
            if node.id not in keep:
                del cot[node.id]
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.id not in needed:
                    continue
                prev = cot.get(parent.id)
                cot[parent.id] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = cot.get(w.id)
        if g is None:
            if not allow_unused:
                raise GradError(f"wrt node {w!r} is not part of the output's graph")
            g = Node(np.zeros(w.shape))
        out.append(g)
    return out


@contextmanager
def _nullctx():
    yield
