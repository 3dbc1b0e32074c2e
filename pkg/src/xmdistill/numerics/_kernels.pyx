# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Loops are written for the small per-utterance shapes the encoder sees, where
numpy's per-call overhead and temporaries dominate.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef void _gemm(bint ta, bint tb, Py_ssize_t m, Py_ssize_t n, Py_ssize_t k,
                double* a, double* b, double* c, double beta) noexcept nogil:
    # row-major C[m, n] = op(A) @ op(B) + beta * C, via column-major dgemm on the transposes
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef int im = <int>m, jn = <int>n, kk = <int>k
    cdef int lda = im if ta else kk
    cdef int ldb = kk if tb else jn
    cdef double alpha = 1.0
    if m == 0 or n == 0:
        return
    dgemm(&cb, &ca, &jn, &im, &kk, &alpha, b, &ldb, a, &lda, &beta, c, &jn)


cdef _im2col(const double[:, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t n_out):
    cdef Py_ssize_t c_in = x.shape[0], c, j, t
    cols_arr = np.empty((c_in * k, n_out), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    for c in range(c_in):
        for j in range(k):
            for t in range(n_out):
                cols[c * k + j, t] = x[c, t * stride + j]
    return cols_arr


def conv1d_forward(const double[:, ::1] x, const double[:, :, ::1] w, Py_ssize_t stride):
    cdef Py_ssize_t c_out = w.shape[0], c_in = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t n_out = (x.shape[1] - k) // stride + 1
    cdef double[:, ::1] cols = _im2col(x, k, stride, n_out)
    w2 = np.ascontiguousarray(np.asarray(w).reshape(c_out, c_in * k))
    cdef const double[:, ::1] wv = w2
    out_arr = np.empty((c_out, n_out), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    _gemm(False, False, c_out, n_out, c_in * k, <double*>&wv[0, 0], &cols[0, 0], &out[0, 0], 0.0)
    return out_arr


def conv1d_backward(const double[:, ::1] x, const double[:, :, ::1] w,
                    const double[:, ::1] gout, Py_ssize_t stride):
    cdef Py_ssize_t c_out = w.shape[0], c_in = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t n_out = gout.shape[1], big_k = c_in * k
    cdef Py_ssize_t c, j, t
    cdef double[:, ::1] cols = _im2col(x, k, stride, n_out)
    w2 = np.ascontiguousarray(np.asarray(w).reshape(c_out, big_k))
    cdef const double[:, ::1] wv = w2
    gw_arr = np.empty((c_out, big_k), dtype=np.float64)
    gcols_arr = np.empty((big_k, n_out), dtype=np.float64)
    cdef double[:, ::1] gw = gw_arr
    cdef double[:, ::1] gcols = gcols_arr
    _gemm(False, True, c_out, big_k, n_out, <double*>&gout[0, 0], &cols[0, 0], &gw[0, 0], 0.0)
    _gemm(True, False, big_k, n_out, c_out, <double*>&wv[0, 0], <double*>&gout[0, 0], &gcols[0, 0], 0.0)
    gx_arr = np.zeros((x.shape[0], x.shape[1]), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for c in range(c_in):
        for j in range(k):
            for t in range(n_out):
                gx[c, t * stride + j] += gcols[c * k + j, t]
    return gx_arr, gw_arr.reshape(c_out, c_in, k)


def gelu_forward(x):
    src = np.ascontiguousarray(x, dtype=np.float64)
    out_arr = np.empty_like(src)
    cdef const double[::1] xv = src.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    cdef double v
    for i in range(xv.shape[0]):
        v = xv[i]
        ov[i] = v * (0.5 * (1.0 + erf(v * INV_SQRT2)))
    return out_arr


def gelu_backward(x, gout):
    src = np.ascontiguousarray(x, dtype=np.float64)
    gsrc = np.ascontiguousarray(gout, dtype=np.float64)
    out_arr = np.empty_like(src)
    cdef const double[::1] xv = src.reshape(-1)
    cdef const double[::1] gv = gsrc.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    cdef double v
    for i in range(xv.shape[0]):
        v = xv[i]
        ov[i] = gv[i] * (0.5 * (1.0 + erf(v * INV_SQRT2)) + v * exp(-0.5 * v * v) * INV_SQRT2PI)
    return out_arr


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain, const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mean, var, r, c
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            c = (x[i, j] - mean) * r
            xhat[i, j] = c
            y[i, j] = c * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gout, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = gout.shape[0], d = gout.shape[1]
    gx_arr = np.empty((n, d), dtype=np.float64)
    gg_arr = np.zeros(d, dtype=np.float64)
    gb_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t i, j
    cdef double s1, s2, gh
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = gout[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            gg[j] += gout[i, j] * xhat[i, j]
            gb[j] += gout[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gx[i, j] = rstd[i] * (gout[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return gx_arr, gg_arr, gb_arr


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    y_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s
    return y_arr


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gout):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1]
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += gout[i, j] * y[i, j]
        for j in range(d):
            gx[i, j] = y[i, j] * (gout[i, j] - dot)
    return gx_arr
