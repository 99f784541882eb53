"""Reverse-mode gradients over a small, closed set of dense numpy ops.

Every op that touches a tensor requiring gradients is appended to the
innermost active :class:`Tape`.  Recording order is already a topological
order, so the backward pass is a single reversed sweep.
"""

from __future__ import annotations

import math

import numpy as np

_ACTIVE: list["Tape"] = []

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = None
        self._parents = ()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Records ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, grad=None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf with ``requires_grad``.

        Intermediate gradients are released as soon as they are consumed.
        """
        if loss.size != 1 and grad is None:
            raise ValueError("backward() on a non-scalar needs an explicit output gradient")
        if loss._backward is None and not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring gradients")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            node.grad = None
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """Wrap two operands; a plain constant adopts the dtype of its tensor partner."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _tracking(*parents) -> bool:
    return bool(_ACTIVE) and any(p.requires_grad for p in parents)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _tracking(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _ACTIVE[-1].nodes.append(out)
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        _acc(a, g / b.data)
        _acc(b, -g * out / b.data)

    return _node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: _acc(a, -g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: _acc(a, 2.0 * g * a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: _acc(a, 0.5 * g / out))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _acc(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: _acc(a, g / a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: _acc(a, g * (1.0 - out * out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: _acc(a, g * mask))


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _node(out, (a,), bw)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: _acc(a, g * np.sign(a.data)))


def activation(name: str):
    try:
        return {"tanh": tanh, "relu": relu, "gelu": gelu}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            bd = b.data
            ga = g @ (bd.T if bd.ndim == 2 else np.swapaxes(bd, -1, -2))
            _acc(a, ga)
        if b.requires_grad:
            ad = a.data
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            elif ad.ndim == 2 and g.ndim == 2:
                gb = ad.T @ g
            elif b.data.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
            _acc(b, gb)

    return _node(a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(src)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: _acc(a, np.transpose(g, inv)))


def swapaxes(a, ax1, ax2) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: _acc(a, np.swapaxes(g, ax1, ax2)))


def take(a, index, axis=0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * (axis % a.ndim) + (index,), g)
        _acc(a, full)

    return _node(np.take(a.data, index, axis=axis), (a,), bw)


def concat(tensors, axis=-1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            _acc(t, part)

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: _acc(a, _expand(g, shape, axis, keepdims)),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return _node(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: _acc(a, _expand(g, shape, axis, keepdims) / n),
    )


# ---------------------------------------------------------------------------
# fused blocks
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """LayerNorm over the last axis with affine parameters."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        _acc(gamma, g * xhat)
        _acc(beta, g)
        if x.requires_grad:
            gx = g * gamma.data
            n = x.data.shape[-1]
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            _acc(x, dx)

    return _node(out, (x, gamma, beta), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        _acc(x, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), bw)


def l2_normalize(x, axis=-1, eps=1e-12) -> Tensor:
    x = as_tensor(x)
    return x / sqrt(tsum(square(x), axis=axis, keepdims=True) + eps)
