"""A small define-by-run reverse-mode autodiff engine over dense float64 arrays.

Only the operations the recommender needs are provided.  Broadcasting is
limited to what numpy does for elementwise binary ops; gradients are summed
back to the operand shape.
"""

from contextlib import contextmanager

import numpy as np

from . import _kernels

DTYPE = np.float64
LEAKY_SLOPE = 0.01

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array plus an optional gradient slot and the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root, grad=None):
    """Reverse-mode sweep from ``root``; leaf gradients accumulate."""
    order = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    if grad is None:
        grad = np.ones_like(root.data)
    # intermediate gradients live in a side table so leaves keep their accumulators
    grads = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accum(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accum(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def square(x):
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=LEAKY_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def stable_sigmoid(x):
    """Plain-array logistic function that never overflows."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    if not isinstance(x, Tensor):
        out = stable_sigmoid(x)
        return float(out) if out.ndim == 0 else out
    s = stable_sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax(x):
    """Softmax along the last axis with max-subtraction."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), bw, "softmax")


def dropout(x, rate, training, rng):
    """Inverted dropout; identity outside training or when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions and linear algebra

def tsum(x, axis=None):
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), bw, "sum")


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def inner_product(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"inner_product needs equal-length vectors, got {a.shape} and {b.shape}")
    return _node(np.dot(a.data, b.data), (a, b), lambda g: (g * b.data, g * a.data), "inner")


def rowdot(a, b):
    """Row-wise inner products of two (B, d) matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"rowdot shape mismatch: {a.shape} vs {b.shape}")
    return _node((a.data * b.data).sum(axis=-1), (a, b),
                 lambda g: (g[..., None] * b.data, g[..., None] * a.data), "rowdot")


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tuple(parts), bw, "concat")


# ---------------------------------------------------------------------------
# sparse access

def gather(table, idx):
    """Rows of a 2-D table; result shape is idx.shape + (d,). Gradient is scattered back."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        dense = np.zeros_like(table.data)
        _kernels.scatter_add_rows(dense, idx, g)
        return (dense,)

    return _node(out, (table,), bw, "gather")


def take_cols(x, idx):
    """out[b, n] = x[b, idx[b, n]] for a (B, R) tensor and (B, N) integer index."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        dense = np.zeros_like(x.data)
        _kernels.scatter_add_cols(dense, idx, g)
        return (dense,)

    return _node(out, (x,), bw, "take_cols")


def weighted_sum(w, v):
    """sum_n w[b, n] * v[b, n, :] -> (B, d)."""
    w, v = as_tensor(w), as_tensor(v)
    if w.shape != v.shape[:2]:
        raise ShapeError(f"weighted_sum shape mismatch: {w.shape} vs {v.shape}")
    out = np.einsum("bn,bnd->bd", w.data, v.data)

    def bw(g):
        return np.einsum("bnd,bd->bn", v.data, g), w.data[:, :, None] * g[:, None, :]

    return _node(out, (w, v), bw, "weighted_sum")


# ---------------------------------------------------------------------------
# losses

def log_loss_sum(logits, labels, clamp=1e-12):
    """-sum(y log s(x) + (1-y) log(1 - s(x))) with log arguments clamped at ``clamp``."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    p = stable_sigmoid(logits.data)
    q = stable_sigmoid(-logits.data)
    p_c = np.maximum(p, clamp)
    q_c = np.maximum(q, clamp)
    out = -(y * np.log(p_c) + (1.0 - y) * np.log(q_c)).sum()

    def bw(g):
        # d/dx of -log s(x) is -(1 - s); zero where the clamp is active
        gp = np.where(p > clamp, -q, 0.0)
        gq = np.where(q > clamp, p, 0.0)
        return (g * (y * gp + (1.0 - y) * gq),)

    return _node(out, (logits,), bw, "log_loss")
