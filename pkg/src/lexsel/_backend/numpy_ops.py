"""Pure-numpy implementations of the hot kernels.

Same call signatures as the compiled core in _core.pyx. Everything here
is allocation-happy but correct; the compiled backend fuses the
elementwise passes. Arrays are C-contiguous float32 or float64 and both
backends must agree to within dtype rounding (see tests/test_backend.py).
"""

import numpy as np

NAME = "numpy"


def affine(x, w, b, act=0):
    """y = act(x @ w + b). act: 0 identity, 1 relu, 2 sigmoid."""
    y = x @ w
    y += b
    if act == 1:
        np.maximum(y, 0, out=y)
    elif act == 2:
        # sigmoid via tanh is stable for large |y| in both directions
        np.multiply(y, 0.5, out=y)
        np.tanh(y, out=y)
        y += 1.0
        np.multiply(y, 0.5, out=y)
    return y


def affine_backward(gy, x, w):
    """Gradients of y = x @ w + b given upstream gy.

    Returns (gx, gw, gb). The activation derivative must already be
    folded into gy (see act_backward).
    """
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0)
    return gx, gw, gb


def act_backward(gy, y, act):
    """Pull upstream grad through the activation, using the output y."""
    if act == 0:
        return gy.copy()
    if act == 1:
        return gy * (y > 0)
    if act == 2:
        return gy * y * (1.0 - y)
    raise ValueError(f"unknown act code {act}")


def sigmoid(x):
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def softmax_rows(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def logsumexp_rows(x):
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


def adam_step(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """In-place Adam update with L2 folded into the gradient."""
    if weight_decay != 0.0:
        g = g + weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
