"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a vector-Jacobian closure on the
output tensor; ``backward`` replays them in reverse topological order and
accumulates gradients into the graph's leaves. All math is 64-bit and any
non-finite value, forward or backward, raises ``NumericError`` naming the
offending op.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "leaf")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def detach(self):
        """A new leaf viewing the same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def is_leaf(self):
        return self._vjp is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not provided; divide by a scalar")
        return mul(self, Tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    _check_finite(data, op)
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    else:
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data + b.data, (a, b), "add", vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data - b.data, (a, b), "sub", vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", vjp)


def matmul(a, b):
    """Matrix product with stacked (batched) broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), "matmul", vjp)


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), "transpose", vjp)


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), "reshape", vjp)


def broadcast_to(x, shape):
    x = _wrap(x)

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), "broadcast_to", vjp)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", vjp)


def narrow(x, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    x = _wrap(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    slicer = (slice(None),) * axis + (slice(start, start + length),)

    def vjp(g):
        z = np.zeros_like(x.data)
        z[slicer] = g
        return (z,)

    return _make(x.data[slicer].copy(), (x,), "narrow", vjp)


def reduce_sum(x, axis=None, keepdims=False):
    x = _wrap(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", vjp)


def reduce_mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), "mean", vjp)


def relu(x):
    x = _wrap(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", vjp)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = _wrap(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _make(x.data * phi, (x,), "gelu", vjp)


def sqrt(x):
    x = _wrap(x)
    out_data = np.sqrt(x.data)

    def vjp(g):
        return (g * (0.5 / out_data),)

    return _make(out_data, (x,), "sqrt", vjp)


def clip_min(x, floor):
    """Elementwise max(x, floor); gradient is zero on the clamped side."""
    x = _wrap(x)
    mask = x.data > floor

    def vjp(g):
        return (g * mask,)

    return _make(np.maximum(x.data, floor), (x,), "clip_min", vjp)


def softmax_rows(x):
    """Row-stabilized softmax over the last axis."""
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), "softmax", vjp)


def log_softmax(x):
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out_data) * np.sum(g, axis=-1, keepdims=True),)

    return _make(out_data, (x,), "log_softmax", vjp)


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead) if gain.requires_grad else None
        gbias = np.sum(g, axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxh = g * gain.data
            gx = inv * (
                dxh
                - np.mean(dxh, axis=-1, keepdims=True)
                - xhat * np.mean(dxh * xhat, axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", vjp)


def l2_normalize(x, eps=1e-12):
    """Scale each last-axis vector to unit Euclidean norm (zero vectors pass through scaled by 1/eps)."""
    x = _wrap(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    y = x.data / n

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,)

    return _make(y, (x,), "l2_normalize", vjp)


def dropout(x, rate, training, rng):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)

    def vjp(g):
        return (g * keep * scale,)

    return _make(x.data * keep * scale, (x,), "dropout", vjp)


def spectrum_select(a, b, c, choice):
    """Per-sample pick along the leading axis: out[i] = (a, b, c)[choice[i]][i].

    The selection index is data, not a tensor; gradients pass through the
    chosen values unchanged and the others receive zero.
    """
    a, b, c = _wrap(a), _wrap(b), _wrap(c)
    choice = np.asarray(choice, dtype=np.int64)
    if not (a.shape == b.shape == c.shape):
        raise ShapeError(f"spectrum_select operands disagree: {a.shape}, {b.shape}, {c.shape}")
    if choice.shape != (a.shape[0],):
        raise ShapeError(f"choice must have shape ({a.shape[0]},), got {choice.shape}")
    out_data = a.data.copy()
    m1, m2 = choice == 1, choice == 2
    out_data[m1] = b.data[m1]
    out_data[m2] = c.data[m2]

    def vjp(g):
        grads = []
        for i, t in enumerate((a, b, c)):
            if not t.requires_grad:
                grads.append(None)
                continue
            z = np.zeros_like(t.data)
            m = choice == i
            z[m] = g[m]
            grads.append(z)
        return tuple(grads)

    return _make(out_data, (a, b, c), "spectrum_select", vjp)


def gather_pairs(x, rows, cols):
    """Pick x[rows[i], cols[i]] into a vector; backward scatter-adds."""
    x = _wrap(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _make(x.data[rows, cols], (x,), "gather_pairs", vjp)


def linear(x, w, b=None):
    """Affine map over the last axis: x @ w (+ b)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------

def backward(root):
    """Accumulate d(root)/d(leaf) into every requires_grad leaf below ``root``.

    Repeated calls add into existing .grad buffers.
    """
    if root.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward on a tensor that does not require grad")

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward:{node._op}")
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
