# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: fused affine+activation, fused backward passes,
fused Adam, row softmax/logsumexp.

Matmuls go through BLAS (scipy's exported cython_blas symbols); the wins
over the numpy backend come from fusing the elementwise passes that numpy
spreads over several temporaries. Loops are flat over contiguous buffers
with the activation branch hoisted out, so the C compiler can vectorize.
float32 and float64 via fused types.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expf, log, logf, sqrt, sqrtf
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

NAME = "core"

ctypedef fused real:
    float
    double


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _log(real x) noexcept nogil:
    if real is float:
        return logf(x)
    else:
        return log(x)


cdef inline real _sqrt(real x) noexcept nogil:
    if real is float:
        return sqrtf(x)
    else:
        return sqrt(x)


cdef inline real _relu(real x) noexcept nogil:
    # ternary, not fmax: this exact shape folds to maxps under -O3
    cdef real zero = 0
    return x if x > zero else zero


cdef inline void _gemm(bint ta, bint tb, int m, int n, int k,
                       real* a, int lda, real* b, int ldb,
                       real* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = opA(m,k) @ opB(k,n), expressed as the
    # column-major product C^T = opB^T @ opA^T.
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    cdef real one = 1, zero = 0
    if real is float:
        sgemm(&ctb, &cta, &n, &m, &k, &one, b, &ldb, a, &lda, &zero, c, &ldc)
    else:
        dgemm(&ctb, &cta, &n, &m, &k, &one, b, &ldb, a, &lda, &zero, c, &ldc)


def affine(real[:, ::1] x, real[:, ::1] w, real[::1] b, int act=0):
    """y = act(x @ w + b). act: 0 identity, 1 relu, 2 sigmoid."""
    cdef int m = x.shape[0], k = x.shape[1], n = w.shape[1]
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((m, n), dtype=dtype)
    cdef real[:, ::1] ym = y_arr
    cdef real* y
    cdef real* bp
    cdef Py_ssize_t i, j, base
    cdef real v
    if m == 0 or n == 0:
        return y_arr
    if k > 0:
        _gemm(0, 0, m, n, k, &x[0, 0], k, &w[0, 0], n, &ym[0, 0], n)
    else:
        y_arr.fill(0)
    y = &ym[0, 0]
    bp = &b[0]
    # real-typed constants: int literals would promote the loop body to
    # double and kill vectorization for the float32 case
    cdef real one = 1
    with nogil:
        if act == 0:
            for i in range(m):
                base = i * n
                for j in range(n):
                    y[base + j] += bp[j]
        elif act == 1:
            for i in range(m):
                base = i * n
                for j in range(n):
                    y[base + j] = _relu(y[base + j] + bp[j])
        else:
            for i in range(m):
                base = i * n
                for j in range(n):
                    v = y[base + j] + bp[j]
                    y[base + j] = one / (one + _exp(-v))
    return y_arr


def affine_backward(real[:, ::1] gy, real[:, ::1] x, real[:, ::1] w):
    """(gx, gw, gb) for y = x @ w + b; gy already includes the act term."""
    cdef int m = x.shape[0], k = x.shape[1], n = w.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((m, k), dtype=dtype)
    gw_arr = np.zeros((k, n), dtype=dtype)
    gb_arr = np.zeros(n, dtype=dtype)
    cdef real[:, ::1] gxm = gx_arr
    cdef real[:, ::1] gwm = gw_arr
    cdef real[::1] gbm = gb_arr
    cdef real* gyp
    cdef real* gbp
    cdef Py_ssize_t i, j, base
    if m > 0 and n > 0:
        if k > 0:
            # gx = gy @ w^T ; gw = x^T @ gy
            _gemm(0, 1, m, k, n, &gy[0, 0], n, &w[0, 0], n, &gxm[0, 0], k)
            _gemm(1, 0, k, n, m, &x[0, 0], k, &gy[0, 0], n, &gwm[0, 0], n)
        gyp = &gy[0, 0]
        gbp = &gbm[0]
        with nogil:
            for i in range(m):
                base = i * n
                for j in range(n):
                    gbp[j] += gyp[base + j]
    return gx_arr, gw_arr, gb_arr


def act_backward(real[:, ::1] gy, real[:, ::1] y, int act):
    cdef Py_ssize_t total = gy.shape[0] * gy.shape[1], i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((gy.shape[0], gy.shape[1]), dtype=dtype)
    cdef real[:, ::1] om = out_arr
    cdef real* o
    cdef real* gp
    cdef real* yp
    if total == 0:
        return out_arr
    o = &om[0, 0]
    gp = &gy[0, 0]
    yp = &y[0, 0]
    cdef real zero = 0, one = 1
    with nogil:
        if act == 0:
            for i in range(total):
                o[i] = gp[i]
        elif act == 1:
            for i in range(total):
                o[i] = gp[i] if yp[i] > zero else zero
        else:
            for i in range(total):
                o[i] = gp[i] * yp[i] * (one - yp[i])
    return out_arr


def sigmoid(real[:, ::1] x):
    # numpy's vectorized tanh beats a scalar exp loop here; there is
    # nothing to fuse, so delegate.
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j, base
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((m, n), dtype=dtype)
    cdef real[:, ::1] om = out_arr
    cdef real* o
    cdef real* xp
    cdef real mx, s, inv, one = 1
    if m == 0 or n == 0:
        return out_arr
    o = &om[0, 0]
    xp = &x[0, 0]
    with nogil:
        for i in range(m):
            base = i * n
            mx = xp[base]
            for j in range(1, n):
                if xp[base + j] > mx:
                    mx = xp[base + j]
            s = 0
            for j in range(n):
                o[base + j] = _exp(xp[base + j] - mx)
                s += o[base + j]
            inv = one / s
            for j in range(n):
                o[base + j] *= inv
    return out_arr


def logsumexp_rows(real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j, base
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(m, dtype=dtype)
    cdef real[::1] om = out_arr
    cdef real* xp
    cdef real mx, s
    if m == 0 or n == 0:
        out_arr.fill(-np.inf)
        return out_arr
    xp = &x[0, 0]
    with nogil:
        for i in range(m):
            base = i * n
            mx = xp[base]
            for j in range(1, n):
                if xp[base + j] > mx:
                    mx = xp[base + j]
            s = 0
            for j in range(n):
                s += _exp(xp[base + j] - mx)
            om[i] = mx + _log(s)
    return out_arr


def adam_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
              long t, double lr, double beta1, double beta2, double eps,
              double weight_decay):
    """One fused in-place Adam update over a flat parameter view."""
    cdef Py_ssize_t n = p.shape[0], i
    cdef real b1 = <real> beta1, b2 = <real> beta2
    cdef real c1 = <real> (1.0 / (1.0 - beta1 ** t))
    cdef real c2 = <real> (1.0 / (1.0 - beta2 ** t))
    cdef real a = <real> lr, e = <real> eps, wd = <real> weight_decay
    cdef real gi, one = 1
    with nogil:
        for i in range(n):
            gi = g[i] + wd * p[i]
            m[i] = b1 * m[i] + (one - b1) * gi
            v[i] = b2 * v[i] + (one - b2) * gi * gi
            p[i] -= a * (m[i] * c1) / (_sqrt(v[i] * c2) + e)
