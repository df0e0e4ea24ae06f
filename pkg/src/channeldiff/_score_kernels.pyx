# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled mixture score kernels.

Same contract as ``_score_kernels_np``: diffused mixture parameters
mu (K, m), var (K, m), logw (K,) and batched states x (B, m).  These run in
the innermost loop of every guided sampling step, which is why they get a
compiled implementation; the numpy module is the reference fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, M_PI


cdef inline double _logsumexp2(double[::1] buf, Py_ssize_t K) nogil:
    cdef double m = buf[0]
    cdef Py_ssize_t k
    for k in range(1, K):
        if buf[k] > m:
            m = buf[k]
    cdef double s = 0.0
    for k in range(K):
        s += exp(buf[k] - m)
    return m + log(s)


def gmm_logpdf(double[:, ::1] x, double[:, ::1] mu, double[:, ::1] var, double[::1] logw):
    cdef Py_ssize_t B = x.shape[0], m = x.shape[1], K = mu.shape[0]
    cdef cnp.ndarray[double, ndim=1] out_arr = np.empty(B)
    cdef double[::1] out = out_arr
    cdef cnp.ndarray[double, ndim=1] lj_arr = np.empty(K)
    cdef double[::1] lj = lj_arr
    cdef Py_ssize_t b, k, d
    cdef double acc, r
    for b in range(B):
        for k in range(K):
            acc = logw[k]
            for d in range(m):
                r = x[b, d] - mu[k, d]
                acc -= 0.5 * (r * r / var[k, d] + log(2.0 * M_PI * var[k, d]))
            lj[k] = acc
        out[b] = _logsumexp2(lj, K)
    return out_arr


def gmm_score(double[:, ::1] x, double[:, ::1] mu, double[:, ::1] var, double[::1] logw):
    cdef Py_ssize_t B = x.shape[0], m = x.shape[1], K = mu.shape[0]
    cdef cnp.ndarray[double, ndim=2] out_arr = np.zeros((B, m))
    cdef double[:, ::1] out = out_arr
    cdef cnp.ndarray[double, ndim=1] lj_arr = np.empty(K)
    cdef double[::1] lj = lj_arr
    cdef Py_ssize_t b, k, d
    cdef double acc, r, lse, w
    for b in range(B):
        for k in range(K):
            acc = logw[k]
            for d in range(m):
                r = x[b, d] - mu[k, d]
                acc -= 0.5 * (r * r / var[k, d] + log(2.0 * M_PI * var[k, d]))
            lj[k] = acc
        lse = _logsumexp2(lj, K)
        for k in range(K):
            w = exp(lj[k] - lse)
            for d in range(m):
                out[b, d] -= w * (x[b, d] - mu[k, d]) / var[k, d]
    return out_arr


def gmm_score_hvp(double[:, ::1] x, double[:, ::1] mu, double[:, ::1] var,
                  double[::1] logw, double[:, ::1] v):
    cdef Py_ssize_t B = x.shape[0], m = x.shape[1], K = mu.shape[0]
    cdef cnp.ndarray[double, ndim=2] out_arr = np.zeros((B, m))
    cdef double[:, ::1] out = out_arr
    cdef cnp.ndarray[double, ndim=1] lj_arr = np.empty(K)
    cdef double[::1] lj = lj_arr
    cdef cnp.ndarray[double, ndim=1] s_arr = np.empty(m)
    cdef double[::1] s = s_arr
    cdef cnp.ndarray[double, ndim=1] g_arr = np.empty(m)
    cdef double[::1] g = g_arr
    cdef Py_ssize_t b, k, d
    cdef double acc, r, lse, w, gv, sv
    for b in range(B):
        for k in range(K):
            acc = logw[k]
            for d in range(m):
                r = x[b, d] - mu[k, d]
                acc -= 0.5 * (r * r / var[k, d] + log(2.0 * M_PI * var[k, d]))
            lj[k] = acc
        lse = _logsumexp2(lj, K)
        for d in range(m):
            s[d] = 0.0
            out[b, d] = 0.0
        for k in range(K):
            w = exp(lj[k] - lse)
            gv = 0.0
            for d in range(m):
                g[d] = -(x[b, d] - mu[k, d]) / var[k, d]
                gv += g[d] * v[b, d]
                s[d] += w * g[d]
            for d in range(m):
                out[b, d] += w * (gv * g[d] - v[b, d] / var[k, d])
        sv = 0.0
        for d in range(m):
            sv += s[d] * v[b, d]
        for d in range(m):
            out[b, d] -= s[d] * sv
    return out_arr
