"""Small tensor-level reverse-mode autodiff on top of numpy (float64 only)."""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import UsageError

_state = {"grad": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled():
    return _state["grad"]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name", "consumed")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.name = name
        self.consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def zero_grad(self):
        self.grad = None

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed=None):
        backward(self, seed)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, fn):
    out = Tensor(value)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = fn
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def reciprocal(a):
    r = 1.0 / a.value
    return _node(r, (a,), lambda g: (-g * r * r,))


def power(a, p):
    v = a.value
    return _node(v ** p, (a,), lambda g: (g * p * v ** (p - 1),))


def matmul(a, b):
    """``a @ b`` for a of shape (..., n) and b of shape (n, m), or plain 2-d products."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av @ bv

    def fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return _node(out, (a, b), fn)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), fn)


def tmean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.value)
    return _node(e, (a,), lambda g: (g * e,))


def log(a):
    a = as_tensor(a)
    v = a.value
    return _node(np.log(v), (a,), lambda g: (g / v,))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a):
    a = as_tensor(a)
    v = a.value
    # max(v, 0) + log1p(exp(-|v|)), in place; about 3x faster than np.logaddexp
    out = np.abs(v)
    np.negative(out, out)
    np.exp(out, out)
    np.log1p(out, out)
    out += np.maximum(v, 0.0)
    return _node(out, (a,), lambda g: (g * (1.0 - np.exp(-out)),))


def clip(a, lo, hi):
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return _node(np.clip(v, lo, hi), (a,), lambda g: (g * inside,))


def reshape(a, shape):
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), fn)


def cumsum(a, axis):
    a = as_tensor(a)

    def fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(a.value, axis=axis), (a,), fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return _node(np.stack([t.value for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def _shifted(x, kernel, padding):
    """(B, T, C) -> (B, T_out, kernel * C) window stack along time."""
    B, T, C = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0))) if padding else x
    t_out = T + 2 * padding - kernel + 1
    return np.concatenate([xp[:, j:j + t_out] for j in range(kernel)], axis=2), t_out


def conv1d(x, weight, bias=None, padding=None):
    """Temporal convolution on channels-last input.

    ``x`` has shape (batch, time, in_channels), ``weight`` (kernel, in, out).
    With ``padding=None`` the padding is ``kernel // 2`` ("same" for odd kernels).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    K, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise UsageError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    pad = K // 2 if padding is None else padding
    squeeze = x.ndim == 2
    xv = x.value[:, None, :] if squeeze else x.value
    if K == 1 and pad == 0:
        cols, t_out = xv, xv.shape[1]
    else:
        cols, t_out = _shifted(xv, K, pad)
    wmat = weight.value.reshape(K * cin, cout)
    out = cols @ wmat
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.value
        parents = parents + (bias,)
    if squeeze:
        out = out[:, 0, :]

    def fn(g):
        g3 = g[:, None, :] if squeeze else g
        gw = (cols.reshape(-1, K * cin).T @ g3.reshape(-1, cout)).reshape(K, cin, cout)
        bias_grad = (g3.reshape(-1, cout).sum(axis=0),) if bias is not None else ()
        if not x.requires_grad:
            return (None, gw) + bias_grad
        gcols = g3 @ wmat.T
        if K == 1 and pad == 0:
            gx = gcols
        else:
            B, T, _ = xv.shape
            gxp = np.zeros((B, T + 2 * pad, cin))
            for j in range(K):
                gxp[:, j:j + t_out] += gcols[:, :, j * cin:(j + 1) * cin]
            gx = gxp[:, pad:pad + T]
        if squeeze:
            gx = gx[:, 0, :]
        return (gx, gw) + bias_grad

    return _node(out, parents, fn)


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order[::-1]


def backward(root, seed=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    A trace can be consumed once; a second call without a fresh forward pass
    raises ``UsageError``.
    """
    if root.consumed:
        raise UsageError("stale trace: run a new forward pass before calling backward again")
    if not root.requires_grad:
        raise UsageError("output does not depend on any trainable tensor")
    seed = np.ones_like(root.value) if seed is None else np.broadcast_to(
        np.asarray(seed, dtype=np.float64), root.shape)
    grads = {id(root): np.array(seed, dtype=np.float64)}
    for node in _toposort(root):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {node.name or 'tensor'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    root.consumed = True
