# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: fused row-wise and elementwise passes.

Same contracts as ``_kernels_np``; selected by ``kernels.py`` when built.
Accumulations run in double for both dtypes, loops are single-threaded and
sequential, so results are bitwise reproducible run to run.
"""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt, tanh

ctypedef fused real:
    float
    double

cdef inline object _empty2(real[:, ::1] x, Py_ssize_t r, Py_ssize_t c):
    if real is float:
        return np.empty((r, c), dtype=np.float32)
    else:
        return np.empty((r, c), dtype=np.float64)


def layernorm_fwd(real[:, ::1] x, double eps=1e-5):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    cdef double mu, var, rs, d
    out_obj = _empty2(x, R, C)
    rstd_obj = np.empty(R, dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out_obj
    cdef real[::1] rstd = rstd_obj
    for i in range(R):
        mu = 0.0
        for j in range(C):
            mu += x[i, j]
        mu /= C
        var = 0.0
        for j in range(C):
            d = x[i, j] - mu
            var += d * d
        var /= C
        rs = 1.0 / sqrt(var + eps)
        rstd[i] = <real> rs
        for j in range(C):
            y[i, j] = <real> ((x[i, j] - mu) * rs)
    return out_obj, rstd_obj


def layernorm_bwd(real[:, ::1] dy, real[:, ::1] y, real[::1] rstd):
    cdef Py_ssize_t R = dy.shape[0], C = dy.shape[1], i, j
    cdef double m1, m2, rs
    out_obj = _empty2(dy, R, C)
    cdef real[:, ::1] dx = out_obj
    for i in range(R):
        m1 = 0.0
        m2 = 0.0
        for j in range(C):
            m1 += dy[i, j]
            m2 += dy[i, j] * y[i, j]
        m1 /= C
        m2 /= C
        rs = rstd[i]
        for j in range(C):
            dx[i, j] = <real> (rs * (dy[i, j] - m1 - y[i, j] * m2))
    return out_obj


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    cdef double m, s, e
    out_obj = _empty2(x, R, C)
    cdef real[:, ::1] p = out_obj
    for i in range(R):
        m = x[i, 0]
        for j in range(1, C):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(C):
            e = exp(x[i, j] - m)
            p[i, j] = <real> e
            s += e
        for j in range(C):
            p[i, j] = <real> (p[i, j] / s)
    return out_obj


def softmax_bwd(real[:, ::1] dp, real[:, ::1] p):
    cdef Py_ssize_t R = dp.shape[0], C = dp.shape[1], i, j
    cdef double s
    out_obj = _empty2(dp, R, C)
    cdef real[:, ::1] dx = out_obj
    for i in range(R):
        s = 0.0
        for j in range(C):
            s += dp[i, j] * p[i, j]
        for j in range(C):
            dx[i, j] = <real> (p[i, j] * (dp[i, j] - s))
    return out_obj


def _adamw_flat(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                double weight_decay, double c1, double c2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi, gi
    for i in range(n):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = <real> mi
        v[i] = <real> vi
        p[i] = <real> (p[i] - lr * ((mi / c1) / (sqrt(vi / c2) + eps) + weight_decay * p[i]))


def adamw_update(param, grad, m, v, double lr, double beta1, double beta2,
                 double eps, double weight_decay, double bias_c1, double bias_c2):
    _adamw_flat(param.reshape(-1), np.ascontiguousarray(grad).reshape(-1),
                m.reshape(-1), v.reshape(-1),
                lr, beta1, beta2, eps, weight_decay, bias_c1, bias_c2)
