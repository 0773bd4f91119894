"""Minimal reverse-mode autodiff on float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  ``backward`` walks
the resulting graph in reverse topological order.  Only what the CNN and
the normalization layers need is implemented.
"""
from __future__ import annotations

import contextlib
import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConsistencyError,
    ContractError,
    DegenerateReductionError,
    DimensionError,
    LabelError,
)

DTYPE = np.float64
MAX_RANK = 4

_grad_mode = {"enabled": True}


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation passes)."""
    prev = _grad_mode["enabled"]
    _grad_mode["enabled"] = False
    try:
        yield
    finally:
        _grad_mode["enabled"] = prev


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one purpose ("init", "data", "shuffle", ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def relu(self):
        return relu(self)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _grad_mode["enabled"] and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), _bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), _bw, "div")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"reduction axis {ax} out of range for rank {ndim}", axis=ax)
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), _bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DegenerateReductionError("mean over an empty extent")
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix", axis=a.ndim)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}", axis=1)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, weight, bias):
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}", axis=1)

    def _bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), _bw, "linear")


def reduce_stats(a, axes):
    """Mean and biased variance over ``axes``, kept broadcastable to ``a``."""
    a = as_tensor(a)
    if axes is None or len(tuple(axes)) == 0:
        raise DimensionError("reduce_stats needs at least one axis")
    axes = _norm_axes(tuple(axes), a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DegenerateReductionError("reduce_stats over an empty extent")
    mu = mean(a, axes, keepdims=True)
    centered = sub(a, mu)
    var = mean(square(centered), axes, keepdims=True)
    return mu, var


def normalize(a, axes, eps):
    """``(a - mean) / sqrt(var + eps)`` over ``axes`` as one fused op.

    Returns ``(xhat, mean, var)``; the statistics are plain arrays (keepdims).
    """
    a = as_tensor(a)
    axes = _norm_axes(tuple(axes), a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DegenerateReductionError("normalize over an empty extent")
    r = 1.0 / count
    mu = a.data.sum(axis=axes, keepdims=True) * r
    centered = a.data - mu
    var = (centered * centered).sum(axis=axes, keepdims=True) * r
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def _bw(g):
        gm = g.sum(axis=axes, keepdims=True) * r
        gx = (g * xhat).sum(axis=axes, keepdims=True) * r
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), _bw, "normalize"), mu, var


# convolution -------------------------------------------------------------

def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of a B x Cin x H x W input with a Cout x Cin x k x k kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4, got rank {x.ndim}", axis=0)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be rank 4, got rank {kernel.ndim}", axis=0)
    cout, cin, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"kernel must be square, got {k}x{k2}", axis=3)
    if k % 2 == 0:
        raise DimensionError(f"kernel extent must be odd, got {k}", axis=2)
    if x.shape[1] != cin:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {cin}", axis=1)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    b, _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1:
        raise DimensionError(f"output extent {ho} < 1", axis=2)
    if wo < 1:
        raise DimensionError(f"output extent {wo} < 1", axis=3)

    if padding:
        xp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    # (B, Cin, Ho, Wo, k, k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, cin * k * k)
    kmat = kernel.data.reshape(cout, cin * k * k)
    out = (cols @ kmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def _bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        dk = (gmat.T @ cols).reshape(kernel.shape)
        if not x.requires_grad:
            return None, dk
        dcols = np.ascontiguousarray((gmat @ kmat).reshape(b, ho, wo, cin, k, k).transpose(4, 5, 0, 3, 1, 2))
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk

    return _make(np.ascontiguousarray(out), (x, kernel), _bw, "conv2d")


# loss --------------------------------------------------------------------

def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy with max-subtraction; ``reduction`` is "mean" or "sum"."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("logits must be B x K", axis=logits.ndim)
    n, k = logits.shape
    if n < 1:
        raise DegenerateReductionError("cross_entropy needs at least one sample")
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}", axis=0)
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {k})", index=int(bad[0]))
    labels = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_sample = lse - shifted[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def _bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g * scale),)

    return _make(per_sample.sum() * scale, (logits,), _bw, "cross_entropy")


# backward / optimizer ----------------------------------------------------

def _topo_order(root):
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict keyed by leaf tensor (``wrt=None``) or, when ``wrt`` is a
    mapping name -> Tensor, a dict name -> gradient array with zeros for
    leaves the loss does not reach.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any grad-enabled tensor")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is None:
        return {t: g for t, g in leaves.values()}
    return {name: (leaves[id(t)][1] if id(t) in leaves else np.zeros_like(t.data)) for name, t in wrt.items()}


def sgd_step(params, grads, lr, frozen=()):
    """In-place ``p <- p - lr * g`` over a name -> array mapping.

    Names in ``frozen`` are skipped and need no gradient entry.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    frozen = set(frozen)
    missing = [n for n in params if n not in frozen and n not in grads]
    if missing:
        raise ConsistencyError(f"no gradient for parameter(s): {', '.join(missing)}")
    for name, p in params.items():
        if name in frozen:
            continue
        params[name] = p - lr * grads[name]
