"""Shared test helpers: central finite differences against the tape."""

import numpy as np

from lexsel import diffnet as dn


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, arrays, rtol=1e-5, atol=1e-7, h=1e-6):
    """Compare tape gradients of sum(build(*tensors) * W) against central
    differences, one input at a time. Arrays must be float64."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [dn.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(0).standard_normal(out.shape)
    loss = dn.tsum(dn.mul(out, dn.Tensor(w, dtype=np.float64)))
    dn.backward(loss)

    for k, (arr, t) in enumerate(zip(arrays, tensors)):
        def f(x, k=k):
            probe = [a.copy() for a in arrays]
            probe[k] = x
            ts = [dn.Tensor(a, dtype=np.float64) for a in probe]
            o = build(*ts)
            return float((o.data * w).sum())

        num = numeric_grad(f, arr, h=h)
        got = t.grad
        assert got is not None, f"input {k} got no gradient"
        np.testing.assert_allclose(got, num, rtol=rtol, atol=atol,
                                   err_msg=f"input {k} gradient mismatch")
