"""Dense float64 tensor engine with reverse-mode and forward-mode derivatives.

Every operation builds a dynamic tape: a :class:`Tensor` records its parents
and a closure that maps the output adjoint to parent adjoints.  Calling
:func:`backward` on a scalar output walks the tape once in reverse
topological order.  Forward-mode (Jacobian-vector products) is carried by an
optional ``tangent`` array that propagates through the same operations, which
is how exact directional derivatives of vector-valued graphs are obtained
without one reverse pass per output.

The primitive set is deliberately small: matmul, add/sub/mul/div, relu,
sigmoid, softmax, log, exp, sum, mean, clamp.  ``log`` and ``divide`` clamp
their (denominator) inputs to ``>= 1e-12`` so probability-zero entries never
produce NaN gradients; ``exp`` clamps its input to ``<= 700`` to stay inside
float64 range.  Every primitive checks its result for NaN/Inf and raises
:class:`NonFiniteError` naming the offending node.
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12
EXP_CEIL = 700.0


class DiffcoreError(Exception):
    """Base error for tensor-engine failures."""


class ShapeMismatchError(DiffcoreError):
    """Operand shapes incompatible for the named primitive."""


class NonFiniteError(DiffcoreError):
    """A primitive produced NaN or Inf."""


class GraphError(DiffcoreError):
    """Graph misuse: unknown leaf, unbound leaf, or non-scalar backward."""


class Tensor:
    """A node in the tape: float64 data plus differentiation bookkeeping.

    ``data`` is immutable by convention once the node exists.  ``grad`` is
    filled by :func:`backward`; ``tangent`` carries the forward-mode
    directional derivative when one was seeded on an upstream leaf.
    """

    __slots__ = ("data", "grad", "tangent", "op", "_parents", "_vjp")

    def __init__(self, data, *, op="leaf", parents=(), vjp=None, tangent=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tangent = tangent
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, data, parents, vjp, tangent=None) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by node '{op}'")
    return Tensor(data, op=op, parents=parents, vjp=vjp, tangent=tangent)


def _unbroadcast(g, shape):
    """Sum an adjoint back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _zeros_like(x):
    return np.zeros_like(x.data)


def _binary_tangent(a, b, fa, fb):
    if a.tangent is None and b.tangent is None:
        return None
    ta = a.tangent if a.tangent is not None else _zeros_like(a)
    tb = b.tangent if b.tangent is not None else _zeros_like(b)
    return fa(ta) + fb(tb)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    tan = _binary_tangent(a, b, lambda t: t, lambda t: t)
    return _node("add", out, (a, b), vjp, tan)


def subtract(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"subtract: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    tan = _binary_tangent(a, b, lambda t: t, lambda t: -t)
    return _node("subtract", out, (a, b), vjp, tan)


def multiply(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"multiply: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    tan = _binary_tangent(a, b, lambda t: t * b.data, lambda t: a.data * t)
    return _node("multiply", out, (a, b), vjp, tan)


def divide(a, b) -> Tensor:
    """Elementwise a / max(b, 1e-12); defined for non-negative denominators."""
    a, b = _lift(a), _lift(b)
    denom = np.maximum(b.data, LOG_FLOOR)
    live = b.data > LOG_FLOOR
    try:
        out = a.data / denom
    except ValueError as exc:
        raise ShapeMismatchError(f"divide: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g / denom, a.shape)
        gb = _unbroadcast(-g * a.data / (denom * denom) * live, b.shape)
        return ga, gb

    tan = _binary_tangent(
        a, b,
        lambda t: t / denom,
        lambda t: -a.data / (denom * denom) * live * t,
    )
    return _node("divide", out, (a, b), vjp, tan)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeMismatchError(
            f"matmul: only 1-D/2-D operands supported, got {a.shape} @ {b.shape}"
        )
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}") from exc

    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]

    def _as2d(g):
        g = np.asarray(g)
        if a.ndim == 1 and b.ndim == 1:
            return g.reshape(1, 1)
        if a.ndim == 1:
            return g.reshape(1, -1)
        if b.ndim == 1:
            return g.reshape(-1, 1)
        return g

    def vjp(g):
        g2 = _as2d(g)
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb

    tan = None
    if a.tangent is not None or b.tangent is not None:
        ta = a.tangent if a.tangent is not None else _zeros_like(a)
        tb = b.tangent if b.tangent is not None else _zeros_like(b)
        tan = ta @ b.data + a.data @ tb
    return _node("matmul", out, (a, b), vjp, tan)


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    tan = None if x.tangent is None else x.tangent * mask
    return _node("relu", out, (x,), vjp, tan)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    deriv = out * (1.0 - out)

    def vjp(g):
        return (g * deriv,)

    tan = None if x.tangent is None else x.tangent * deriv
    return _node("sigmoid", out, (x,), vjp, tan)


def softmax(x, axis=-1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to exactly the
    normalized value in float64."""
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - inner) * out,)

    tan = None
    if x.tangent is not None:
        t = x.tangent
        tan = (t - np.sum(t * out, axis=axis, keepdims=True)) * out
    return _node("softmax", out, (x,), vjp, tan)


def log(x) -> Tensor:
    """Natural log of max(x, 1e-12); gradient is zero where the clamp binds."""
    x = _lift(x)
    clamped = np.maximum(x.data, LOG_FLOOR)
    live = x.data > LOG_FLOOR
    out = np.log(clamped)

    def vjp(g):
        return (g * live / clamped,)

    tan = None if x.tangent is None else x.tangent * live / clamped
    return _node("log", out, (x,), vjp, tan)


def exp(x) -> Tensor:
    """Exp of min(x, 700); the ceiling keeps float64 outputs finite."""
    x = _lift(x)
    live = x.data < EXP_CEIL
    out = np.exp(np.minimum(x.data, EXP_CEIL))
    deriv = out * live

    def vjp(g):
        return (g * deriv,)

    tan = None if x.tangent is None else x.tangent * deriv
    return _node("exp", out, (x,), vjp, tan)


def _reduction_vjp(x, axis, keepdims, scale):
    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy() * scale,)

    return vjp


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - primitive name
    x = _lift(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    vjp = _reduction_vjp(x, axis, keepdims, 1.0)
    tan = None
    if x.tangent is not None:
        tan = np.sum(x.tangent, axis=axis, keepdims=keepdims)
    return _node("sum", out, (x,), vjp, tan)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.shape[axis]
    vjp = _reduction_vjp(x, axis, keepdims, 1.0 / count)
    tan = None
    if x.tangent is not None:
        tan = np.mean(x.tangent, axis=axis, keepdims=keepdims)
    return _node("mean", out, (x,), vjp, tan)


def clamp(x, lo, hi) -> Tensor:
    x = _lift(x)
    out = np.clip(x.data, lo, hi)
    interior = (x.data > lo) & (x.data < hi)

    def vjp(g):
        return (g * interior,)

    tan = None if x.tangent is None else x.tangent * interior
    return _node("clamp", out, (x,), vjp, tan)


def topo_order(out: Tensor):
    """Return the reachable tape in topological order (parents first)."""
    seen = set()
    order = []
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(out: Tensor):
    """Accumulate d(out)/d(node) into ``grad`` of every tape node.

    ``out`` must be scalar.  Each node's adjoint closure runs exactly once.
    """
    if out.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {out.shape}")
    order = topo_order(out)
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


class ComputeGraph:
    """A reusable graph: a builder closure plus the registered leaf ids.

    ``build`` receives a dict mapping each leaf id to its bound
    :class:`Tensor` and returns the output tensor; the tape it creates is the
    node list of the graph for that evaluation.
    """

    def __init__(self, build, leaf_ids):
        self.build = build
        self.leaf_ids = tuple(leaf_ids)

    def bind(self, leaves):
        missing = [lid for lid in self.leaf_ids if lid not in leaves]
        if missing:
            raise GraphError(f"unbound leaves: {missing}")
        return {lid: _lift(leaves[lid]) for lid in self.leaf_ids}


def forward(graph: ComputeGraph, leaves) -> Tensor:
    """Evaluate the graph at the bound leaves; intermediates stay on the tape."""
    bound = graph.bind(leaves)
    return graph.build(bound)


def gradient(graph: ComputeGraph, leaves, wrt) -> np.ndarray:
    """Reverse-mode d(output)/d(leaf ``wrt``) for a scalar-output graph."""
    if wrt not in graph.leaf_ids:
        raise GraphError(f"unknown leaf id: {wrt!r}")
    bound = graph.bind(leaves)
    out = graph.build(bound)
    backward(out)
    leaf = bound[wrt]
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    return np.asarray(leaf.grad, dtype=np.float64)


def directional_derivative(graph: ComputeGraph, leaves, wrt, direction) -> np.ndarray:
    """Forward-mode J @ direction where J is d(output)/d(leaf ``wrt``).

    The output may be vector-valued; the result has the output's shape.
    """
    if wrt not in graph.leaf_ids:
        raise GraphError(f"unknown leaf id: {wrt!r}")
    bound = graph.bind(leaves)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != bound[wrt].shape:
        raise ShapeMismatchError(
            f"direction shape {direction.shape} != leaf shape {bound[wrt].shape}"
        )
    bound[wrt].tangent = direction
    out = graph.build(bound)
    if out.tangent is None:
        return np.zeros_like(out.data)
    return np.asarray(out.tangent, dtype=np.float64)
