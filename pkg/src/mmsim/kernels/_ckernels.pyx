# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels; drop-in replacements for ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erf, INFINITY

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(const double[:, ::1] x, const unsigned char[:, ::1] mask=None):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s, v
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef bint masked = mask is not None
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            if masked and not mask[i, j]:
                continue
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            if masked and not mask[i, j]:
                out[i, j] = 0.0
            else:
                v = exp(x[i, j] - mx)
                out[i, j] = v
                s += v
        for j in range(m):
            out[i, j] = out[i, j] / s
    return out_arr


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out_arr


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain,
                       const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mu, var, d, inv
    out_arr = np.empty((n, m), dtype=np.float64)
    xhat_arr = np.empty((n, m), dtype=np.float64)
    inv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv_std = inv_arr
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        inv = 1.0 / sqrt(var + eps)
        inv_std[i] = inv
        for j in range(m):
            d = (x[i, j] - mu) * inv
            xhat[i, j] = d
            out[i, j] = d * gain[j] + bias[j]
    return out_arr, xhat_arr, inv_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] inv_std, const double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], m = gy.shape[1], i, j
    cdef double a, b, g
    gx_arr = np.empty((n, m), dtype=np.float64)
    ggain_arr = np.zeros(m, dtype=np.float64)
    gbias_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(m):
            g = gy[i, j] * gain[j]
            a += g
            b += g * xhat[i, j]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
        for j in range(m):
            gx[i, j] = (inv_std[i] / m) * (m * gy[i, j] * gain[j] - a - xhat[i, j] * b)
    return gx_arr, ggain_arr, gbias_arr


def gelu_forward(x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    out_arr = np.empty_like(a)
    cdef const double[::1] xf = a.reshape(-1)
    cdef double[::1] of = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    for i in range(n):
        v = xf[i]
        of[i] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return out_arr


def gelu_backward(x, gy):
    a = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(gy, dtype=np.float64)
    out_arr = np.empty_like(a)
    cdef const double[::1] xf = a.reshape(-1)
    cdef const double[::1] gf = g.reshape(-1)
    cdef double[::1] of = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    for i in range(n):
        v = xf[i]
        of[i] = gf[i] * (0.5 * (1.0 + erf(v * INV_SQRT2)) + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out_arr


def average_ranks(x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], i, j, k
    order_arr = np.argsort(a, kind="mergesort")
    ranks_arr = np.empty(n, dtype=np.float64)
    cdef const double[::1] xv = a
    cdef const cnp.intp_t[::1] order = order_arr
    cdef double[::1] ranks = ranks_arr
    cdef double r
    i = 0
    while i < n:
        j = i
        while j + 1 < n and xv[order[j + 1]] == xv[order[i]]:
            j += 1
        r = 0.5 * (i + j)
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks_arr
