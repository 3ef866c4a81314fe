# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; mirror ``_kernels_py`` one-for-one.

Loops are written in a fixed order so results are deterministic run to run.
No -ffast-math: reassociation would break the finite-difference tests.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp

cnp.import_array()

cdef double GELU_C = 0.7978845608
cdef double GELU_A = 0.044715


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma, const double[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    y_arr = np.empty((rows, n))
    xhat_arr = np.empty((rows, n))
    rstd_arr = np.empty(rows)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] gy, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t rows = gy.shape[0], n = gy.shape[1], i, j
    gx_arr = np.empty((rows, n))
    gg_arr = np.zeros(n)
    gb_arr = np.zeros(n)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, gh
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gh = gy[i, j] * gamma[j]
            m1 += gh
            m2 += gh * xhat[i, j]
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gx[i, j] = (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx_arr, gg_arr, gb_arr


cdef _gelu_inner(const double[::1] xv):
    """tanh(c (x + a x^3)) via numpy's vectorised tanh (libm tanh is far slower)."""
    u = np.empty(xv.shape[0])
    cdef double[::1] uv = u
    cdef Py_ssize_t i
    cdef double a
    for i in range(xv.shape[0]):
        a = xv[i]
        uv[i] = GELU_C * (a + GELU_A * a * a * a)
    np.tanh(u, out=u)
    return u


def gelu_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef const double[::1] xv = arr.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef const double[::1] tv = _gelu_inner(xv)
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = 0.5 * xv[i] * (1.0 + tv[i])
    return out


def gelu_bwd(x, gy):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    garr = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.empty_like(arr)
    cdef const double[::1] xv = arr.reshape(-1)
    cdef const double[::1] gv = garr.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef const double[::1] tv = _gelu_inner(xv)
    cdef Py_ssize_t i
    cdef double a, t
    for i in range(xv.shape[0]):
        a = xv[i]
        t = tv[i]
        ov[i] = gv[i] * (0.5 * (1.0 + t)
                         + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * a * a))
    return out


cdef inline void _softmax_row(const double[::1] src, double[::1] dst) noexcept nogil:
    cdef Py_ssize_t j, n = src.shape[0]
    cdef double m = src[0], s = 0.0
    for j in range(1, n):
        if src[j] > m:
            m = src[j]
    for j in range(n):
        dst[j] = exp(src[j] - m)
        s += dst[j]
    for j in range(n):
        dst[j] /= s


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], i
    out = np.empty((rows, x.shape[1]))
    cdef double[:, ::1] o = out
    for i in range(rows):
        _softmax_row(x[i], o[i])
    return out


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    out = np.empty((rows, n))
    cdef double[:, ::1] o = out
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            o[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def attention_fwd(const double[:, :, ::1] q, const double[:, :, ::1] k, const double[:, :, ::1] v):
    cdef Py_ssize_t N = q.shape[0], L = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t n, i, j, c
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double acc
    out_arr = np.zeros((N, L, dh))
    p_arr = np.empty((N, L, L))
    row_arr = np.empty(L)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] p = p_arr
    cdef double[::1] row = row_arr
    for n in range(N):
        for i in range(L):
            for j in range(L):
                acc = 0.0
                for c in range(dh):
                    acc += q[n, i, c] * k[n, j, c]
                row[j] = acc * scale
            _softmax_row(row, p[n, i])
            for j in range(L):
                acc = p[n, i, j]
                for c in range(dh):
                    out[n, i, c] += acc * v[n, j, c]
    return out_arr, p_arr


def attention_bwd(const double[:, :, ::1] q, const double[:, :, ::1] k, const double[:, :, ::1] v,
                  const double[:, :, ::1] p, const double[:, :, ::1] gout):
    cdef Py_ssize_t N = q.shape[0], L = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t n, i, j, c
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double acc, dot, gs
    gq_arr = np.zeros((N, L, dh))
    gk_arr = np.zeros((N, L, dh))
    gv_arr = np.zeros((N, L, dh))
    gp_arr = np.empty(L)
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double[::1] gp = gp_arr
    for n in range(N):
        for i in range(L):
            dot = 0.0
            for j in range(L):
                acc = 0.0
                for c in range(dh):
                    acc += gout[n, i, c] * v[n, j, c]
                    gv[n, j, c] += p[n, i, j] * gout[n, i, c]
                gp[j] = acc
                dot += acc * p[n, i, j]
            for j in range(L):
                gs = p[n, i, j] * (gp[j] - dot) * scale
                for c in range(dh):
                    gq[n, i, c] += gs * k[n, j, c]
                    gk[n, j, c] += gs * q[n, i, c]
    return gq_arr, gk_arr, gv_arr
