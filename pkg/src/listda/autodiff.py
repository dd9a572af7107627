"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every operation returns a new :class:`Node` holding an immutable value and a
closure that pushes the upstream gradient back to its parents.  Graphs are
rebuilt every training step; recorded values are never mutated.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


def _freeze(array):
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


class Node:
    """A value in the computation graph.

    ``grad`` is ``None`` until :func:`backward` has been run through the node.
    Leaves created with :func:`parameter` are the ones whose gradients
    :func:`backward` reports.
    """

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "name", "_backward")
    __array_priority__ = 100

    def __init__(self, value, op="const", parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) and not value.flags.writeable \
            else _freeze(value)
        if not np.all(np.isfinite(self.value)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        self.op = op
        self.parents = tuple(parents)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value.reshape(()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

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
        if isinstance(other, Node):
            raise TypeError("division is only supported by a constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def T(self):
        return transpose(self)


def constant(value, name=None):
    return Node(value, op="const", name=name)


def parameter(value, name=None):
    """A trainable leaf."""
    return Node(value, op="param", requires_grad=True, name=name)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, parents, backward_fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        backward_fn = None
    return Node(value, op=op, parents=parents, backward_fn=backward_fn)


# ---------------------------------------------------------------- element-wise

def add(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), back)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, "sub", (a, b), back)


def mul(a, b):
    """Element-wise product with broadcasting."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, "mul", (a, b), back)


def scale(a, c):
    """Multiply by a python scalar."""
    a, c = as_node(a), float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _make(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def softplus(a):
    """``log(1 + exp(a))`` without overflow."""
    a = as_node(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, "softplus", (a,), lambda g: (g * sig,))


def grad_reverse(a, lam):
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    lam = float(lam)
    if not lam > 0:
        raise ValueError(f"grad_reverse needs lam > 0, got {lam}")
    a = as_node(a)
    return _make(a.value, "grad_reverse", (a,), lambda g: (g * -lam,))


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    return axis + ndim if axis < 0 else axis


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis=-1, keepdims=False):
    """``m + log(sum(exp(a - m)))`` with ``m`` the max along ``axis``."""
    a = as_node(a)
    axis = _norm_axis(axis, a.ndim)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    weights = shifted / total

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _make(value, "logsumexp", (a,), back)


def softmax(a, axis=-1):
    a = as_node(a)
    axis = _norm_axis(axis, a.ndim)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), back)


def log_softmax(a, axis=-1):
    a = as_node(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# -------------------------------------------------------------------- structure

def matmul(a, b):
    """Matrix product; leading (batch) dimensions broadcast as in numpy."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, "matmul", (a, b), back)


def transpose(a):
    """Swap the last two axes."""
    a = as_node(a)
    return _make(np.swapaxes(a.value, -1, -2), "transpose", (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    ndim = nodes[0].ndim
    axis = _norm_axis(axis, ndim)
    ref = nodes[0].shape
    for n in nodes[1:]:
        if n.ndim != ndim or any(n.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", ref, n.shape)
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), "concat", nodes, back)


def take(a, indices, axis=-1):
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = as_node(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = _norm_axis(axis, a.ndim)

    span = tuple(range(axis, axis + indices.ndim))

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(np.moveaxis(out, axis, 0), indices,
                  np.moveaxis(g, span, tuple(range(indices.ndim))))
        return (out,)

    return _make(np.take(a.value, indices, axis=axis), "take", (a,), back)


# --------------------------------------------------------------------- backward

def _topological(root):
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
        for parent in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root):
    """Reverse accumulation from a scalar ``root``.

    Sets ``grad`` on every node that depends on a parameter and returns a
    dict mapping each parameter leaf to its gradient array.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(root.shape)
    params = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node.parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        if node.op == "param":
            params[node] = g
    return params


def numerical_grad(fn, x, eps=1e-5):
    """Central finite differences of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x.copy())
        flat[i] = orig - eps
        lo = fn(x.copy())
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad
