"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the output gradient to input gradients.  The
tape for a scalar result is the topologically ordered list of those nodes
(:meth:`Tensor.tape`); :meth:`Tensor.backward` replays it in reverse.

Grad mode is thread-local, so frozen-model inference under :class:`no_grad`
may run concurrently with other threads.
"""
from __future__ import annotations

import threading

import numpy as np

from .exceptions import ContractError, ShapeError

_state = threading.local()
_debug = False


def is_grad_enabled():
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager disabling graph construction in the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


def set_debug(flag):
    """Toggle NaN/Inf checks after every forward op and on every gradient."""
    global _debug
    _debug = bool(flag)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional float64 array that participates in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _debug:
            _check_finite(data, op)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # -- tape -----------------------------------------------------------
    def tape(self):
        """Nodes reachable from this tensor, inputs before the ops using them."""
        order, seen = [], set()
        stack = [(self, False)]
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
        return order

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with an empty tape")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self.tape()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if _debug:
                    _check_finite(g, "backward")
                node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operators ------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return Tensor._from_op(ad * bd, (a, b), back, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)
    return Tensor._from_op(ad / bd, (a, b), back, "div")


def power(a, exponent):
    exponent = float(exponent)
    ad = a.data
    return Tensor._from_op(
        ad ** exponent, (a,),
        lambda g: (g * exponent * ad ** (exponent - 1.0),), "pow")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


# -- reductions and shape ops -------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return Tensor._from_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return Tensor._from_op(a.data[idx], (a,), back, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return Tensor._from_op(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back, "stack")


def where(mask, a, b):
    """Select from ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(np.where(mask, g, 0.0), sa),
                _unbroadcast(np.where(mask, 0.0, g), sb))
    return Tensor._from_op(np.where(mask, a.data, b.data), (a, b), back, "where")


# -- nonlinearities -------------------------------------------------------

def exp(a):
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    pos = a.data > 0
    return Tensor._from_op(a.data * pos, (a,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return Tensor._from_op(out, (a,), back, "gelu")


def softmax(a, axis=-1):
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor._from_op(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    if a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor._from_op(out, (a,), back, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` for an integer array ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(
            f"token id out of range [0, {weight.shape[0]}): min {ids.min()}, max {ids.max()}")
    wshape = weight.shape

    def back(g):
        full = np.zeros(wshape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (full,)
    return Tensor._from_op(weight.data[ids], (weight,), back, "embedding")


def dropout(x, p, rng, training=True):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- losses -------------------------------------------------------------

def bce_with_logits(logits, targets, weights=None):
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    x = logits.data
    y = np.asarray(targets, dtype=np.float64).reshape(x.shape)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64).reshape(x.shape)
    n = x.size
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.array((w * loss).sum() / n)
    p = _sigmoid(x)
    return Tensor._from_op(out, (logits,), lambda g: (g * w * (p - y) / n,), "bce")


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy for logits ``(N, V)`` and integer targets ``(N,)``."""
    x = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, V) logits and (N,) targets, "
                         f"got {x.shape} and {targets.shape}")
    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.array(-logp[rows, targets].sum() / n)

    def back(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (g * d / n,)
    return Tensor._from_op(out, (logits,), back, "cross_entropy")


def mse(pred, target):
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    diff = pred.data - target
    n = diff.size
    return Tensor._from_op(
        np.array((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")
