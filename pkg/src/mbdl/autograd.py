"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Forward values are computed eagerly when an operation is recorded; the tape
keeps, for every node, its parents and a closure mapping the output cotangent
to input cotangents.  ``backward`` sweeps the tape once in reverse append
order.

Every operation below also accepts plain arrays.  When none of its inputs is a
:class:`Var` it simply returns the numpy result, so model code can be written
once and run either on or off a tape.

Conventions at non-differentiable points: the soft-threshold derivative is 0
for ``|x| <= beta`` and relu's derivative is 0 at 0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .tensor import ShapeError

__all__ = [
    "Tape",
    "Var",
    "TapeError",
    "record",
    "backward",
    "grad",
    "PRIMITIVES",
    "value_of",
]


class TapeError(RuntimeError):
    pass


class _Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "is_leaf")

    def __init__(self, value, parents, vjp, requires_grad, is_leaf):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, node) -> "Var":
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def var(self, value) -> "Var":
        """Trainable leaf; ``backward`` reports its gradient."""
        value = np.array(value, dtype=np.float64)
        return self._append(_Node(value, (), None, True, True))

    def const(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        return self._append(_Node(value, (), None, False, True))


class Var:
    __slots__ = ("tape", "id")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

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
        if isinstance(other, Var):
            return multiply(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return multiply(other, reciprocal(self))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {shapes}") from None


# Each primitive maps input values (+ attrs) to (output, vjp) where
# vjp(g) returns one cotangent per input (None where not differentiable).


def _p_add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_subtract(a, b):
    _broadcast_shape("subtract", a.shape, b.shape)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _p_multiply(a, b):
    _broadcast_shape("multiply", a.shape, b.shape)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_scale(x, c):
    if c.size != 1:
        raise ShapeError(f"scale: factor must be a scalar, got shape {c.shape}")
    cv = c.reshape(())
    return x * cv, lambda g: (g * cv, np.sum(g * x).reshape(c.shape))


def _p_matmul(a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a2.ndim < 1 or b2.ndim < 1 or a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None
    out = out2
    if a.ndim == 1:
        out = out.squeeze(-2)
    if b.ndim == 1:
        out = out.squeeze(-1)

    def vjp(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return ga, gb

    return out, vjp


def _p_soft_threshold(x, beta):
    _broadcast_shape("soft_threshold", x.shape, beta.shape)
    out = tc.soft_threshold(x, beta)
    active = np.abs(x) > beta

    def vjp(g):
        gx = np.where(active, g, 0.0)
        gb = _unbroadcast(np.where(active, -np.sign(x) * g, 0.0), beta.shape)
        return gx, gb

    return out, vjp


def _p_tanh(x):
    out = np.tanh(x)
    return out, lambda g: (g * (1.0 - out * out),)


def _p_sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return out, lambda g: (g * out * (1.0 - out),)


def _p_relu(x):
    out = np.maximum(x, 0.0)
    return out, lambda g: (np.where(x > 0, g, 0.0),)


def _p_softplus(x):
    out = np.logaddexp(0.0, x)
    return out, lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),)


def _p_exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _p_reciprocal(x):
    out = 1.0 / x
    return out, lambda g: (-g * out * out,)


def _p_sum(x, axis=None, keepdims=False):
    out = np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, vjp


def _p_sqnorm(x):
    return np.sum(x * x), lambda g: (2.0 * g * x,)


def _p_l1norm(x):
    return np.sum(np.abs(x)), lambda g: (g * np.sign(x),)


def _p_reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _p_transpose(x):
    if x.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {x.shape}")
    return np.swapaxes(x, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


def _p_concatenate(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        shapes = [x.shape for x in xs]
        raise ShapeError(f"concatenate: incompatible shapes {shapes}") from None
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, cuts, axis=axis))


def _p_spd_solve(a, b):
    factor = tc.SPDFactor(a)
    out = factor.solve(b)

    def vjp(g):
        # a is symmetric, so the adjoint solve reuses the same factor.
        gb = factor.solve(g)
        ga = -(np.outer(gb, out) if out.ndim == 1 else gb @ out.T)
        return ga, gb

    return out, vjp


PRIMITIVES = {
    "add": _p_add,
    "subtract": _p_subtract,
    "multiply": _p_multiply,
    "scale": _p_scale,
    "matmul": _p_matmul,
    "soft_threshold": _p_soft_threshold,
    "tanh": _p_tanh,
    "sigmoid": _p_sigmoid,
    "relu": _p_relu,
    "softplus": _p_softplus,
    "exp": _p_exp,
    "reciprocal": _p_reciprocal,
    "sum": _p_sum,
    "sqnorm": _p_sqnorm,
    "l1norm": _p_l1norm,
    "reshape": _p_reshape,
    "transpose": _p_transpose,
    "concatenate": _p_concatenate,
    "spd_solve": _p_spd_solve,
}


def record(kind: str, inputs, **attrs):
    """Apply primitive ``kind`` to ``inputs``; append a node if any input is a Var."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("inputs belong to different tapes")
    vals = [value_of(x) for x in inputs]
    out, vjp = prim(*vals, **attrs)
    if tape is None:
        return out
    parents = tuple(x.id if isinstance(x, Var) else None for x in inputs)
    requires = any(p is not None and tape.nodes[p].requires_grad for p in parents)
    return tape._append(_Node(out, parents, vjp if requires else None, requires, False))


def backward(tape: Tape, root: Var) -> dict[int, np.ndarray]:
    """Gradient of scalar ``root`` with respect to every trainable leaf of ``tape``."""
    if root.tape is not tape:
        raise TapeError("root does not belong to this tape")
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    grads: list = [None] * (root.id + 1)
    grads[root.id] = np.ones_like(root.value)
    for i in range(root.id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None or not nodes[parent].requires_grad:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    out = {}
    for i, node in enumerate(nodes):
        if node.is_leaf and node.requires_grad:
            g = grads[i] if i < len(grads) else None
            out[i] = np.zeros_like(node.value) if g is None else g
    return out


def grad(root: Var, wrt) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to the leaves in ``wrt``, in order."""
    grads = backward(root.tape, root)
    return [grads[v.id] for v in wrt]


# Public operations.


def add(a, b):
    return record("add", [a, b])


def subtract(a, b):
    return record("subtract", [a, b])


def multiply(a, b):
    return record("multiply", [a, b])


def scale(x, c):
    return record("scale", [x, c])


def matmul(a, b):
    return record("matmul", [a, b])


def soft_threshold(x, beta):
    return record("soft_threshold", [x, beta])


def tanh(x):
    return record("tanh", [x])


def sigmoid(x):
    return record("sigmoid", [x])


def relu(x):
    return record("relu", [x])


def softplus(x):
    return record("softplus", [x])


def exp(x):
    return record("exp", [x])


def reciprocal(x):
    return record("reciprocal", [x])


def sum_(x, axis=None, keepdims=False):
    return record("sum", [x], axis=axis, keepdims=keepdims)


def mean(x):
    return scale(sum_(x), 1.0 / value_of(x).size)


def sqnorm(x):
    return record("sqnorm", [x])


def l1norm(x):
    return record("l1norm", [x])


def reshape(x, shape):
    return record("reshape", [x], shape=tuple(shape))


def transpose(x):
    return record("transpose", [x])


def concatenate(xs, axis=0):
    return record("concatenate", list(xs), axis=axis)


def spd_solve(a, b):
    return record("spd_solve", [a, b])


def softplus_inv(y):
    """Inverse of softplus for y > 0 (plain numpy, used for initialization)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))
