"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers how it was made; backward() walks
the tape in reverse topological order. Only the ops this project needs are
implemented. Hot paths (dense layers, row softmax, Adam) route through the
selected backend; everything else is plain numpy.

Dtype policy: float32 by default, float64 when the inputs are float64
(used by the gradient-check tests). Ops never silently promote.
"""

from __future__ import annotations

import contextlib

import numpy as np

from lexsel._backend import ops

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape building inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def detach(self):
        return stop_grad(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn):
    """Internal node constructor; skips the tape when grads are off."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    live = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = live
    if live:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        np.add(t.grad, g, out=t.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Tensor) and np.isscalar(a):
        a, b = b, a
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)

        def back(g):
            _accum(a, g)

        return _make(a.data + b, (a,), back)
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(neg(b), a)
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    if not isinstance(a, Tensor) and np.isscalar(a):
        a, b = b, a
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)

        def back(g):
            _accum(a, g * b)

        return _make(a.data * b, (a,), back)
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def neg(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def div(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(power(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def back(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), back)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


# -- elementwise nonlinearities ------------------------------------------------


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), back)


def sigmoid(a):
    a = as_tensor(a)
    if a.ndim == 2 and a.data.flags.c_contiguous:
        out = ops.sigmoid(a.data)
    else:
        out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def back(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), back)


def log_sigmoid(a):
    """log sigma(x), stable on both tails: -softplus(-x)."""
    a = as_tensor(a)
    x = a.data
    out = np.where(x > 0, -np.log1p(np.exp(-np.abs(x))),
                   x - np.log1p(np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    sig = 0.5 * (np.tanh(0.5 * x) + 1.0)

    def back(g):
        _accum(a, g * (1.0 - sig))

    return _make(out, (a,), back)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def back(g):
        _accum(a, g * out)

    return _make(out, (a,), back)


def log(a):
    a = as_tensor(a)

    def back(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def clip(a, lo=None, hi=None):
    """Clamp; gradient passes where the input was not clipped."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def back(g):
        _accum(a, g * mask)

    return _make(out, (a,), back)


# -- reductions and shape ------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.shape))

    return _make(np.asarray(out), (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), back)


def repeat_rows(a, r):
    """Tile each row r times consecutively: (n, d) -> (n*r, d)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("repeat_rows expects a 2-D tensor")
    n, d = a.shape
    out = np.repeat(a.data, r, axis=0)

    def back(g):
        _accum(a, g.reshape(n, r, d).sum(axis=1))

    return _make(out, (a,), back)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[lo:hi])

    return _make(out, tuple(tensors), back)


def gather_cols(a, idx):
    """out[i] = a[i, idx[i]] for a (n, m) tensor and int index vector."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        _accum(a, ga)

    return _make(out, (a,), back)


def stop_grad(a):
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False)


def straight_through(relaxed, hard):
    """Forward the hard values, route gradients to the relaxed ones."""
    relaxed = as_tensor(relaxed)
    hard = np.asarray(hard, dtype=relaxed.dtype)

    def back(g):
        _accum(relaxed, g)

    return _make(hard.copy(), (relaxed,), back)


# -- softmax family ------------------------------------------------------------


def _rows2d(x):
    return x.ndim == 2 and x.flags.c_contiguous


def softmax(a):
    """Row softmax over the last axis."""
    a = as_tensor(a)
    if _rows2d(a.data):
        out = ops.softmax_rows(a.data)
    else:
        m = a.data.max(axis=-1, keepdims=True)
        out = np.exp(a.data - m)
        out /= out.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), back)


def log_softmax(a):
    a = as_tensor(a)
    if _rows2d(a.data):
        lse = ops.logsumexp_rows(a.data)[..., None]
    else:
        m = a.data.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    out = a.data - lse

    def back(g):
        _accum(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), back)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    if axis in (-1, a.ndim - 1) and _rows2d(a.data) and not keepdims:
        out = ops.logsumexp_rows(a.data)
    else:
        m = a.data.max(axis=axis, keepdims=True)
        out = (m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)))
        if not keepdims:
            out = np.squeeze(out, axis=axis)

    def back(g):
        oe = out if keepdims else np.expand_dims(out, axis)
        soft = np.exp(a.data - oe)
        ge = g if keepdims else np.expand_dims(g, axis)
        _accum(a, soft * ge)

    return _make(out, (a,), back)


# -- fused dense layer -----------------------------------------------------------

_ACT_CODE = {"identity": 0, "relu": 1, "sigmoid": 2}


def dense(x, w, b, act="identity"):
    """act(x @ w + b) through the backend's fused kernel."""
    code = _ACT_CODE[act]
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = ops.affine(np.ascontiguousarray(x.data), w.data, b.data, code)

    def back(g):
        g = np.ascontiguousarray(g)
        gy = ops.act_backward(g, out, code)
        gx, gw, gb = ops.affine_backward(gy, x.data, w.data)
        _accum(x, gx)
        _accum(w, gw)
        _accum(b, gb)

    return _make(out, (x, w, b), back)


# -- backward pass ---------------------------------------------------------------


def _topo(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, *stores):
    """Populate .grad on every reachable leaf; zero-fill store params
    the loss does not depend on."""
    if loss.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None  # free interior grads; leaves keep theirs
    for store in stores:
        for p in store.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
