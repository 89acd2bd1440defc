# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY, isfinite, fmax

cnp.import_array()


cdef inline double _sq(const double[:, ::1] A, Py_ssize_t i,
                       const double[:, ::1] B, Py_ssize_t j, Py_ssize_t D) noexcept nogil:
    cdef double s = 0.0, diff
    cdef Py_ssize_t d
    for d in range(D):
        diff = A[i, d] - B[j, d]
        s += diff * diff
    return s


def gaussian_kernel(y, double beta):
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t m = Y.shape[0], D = Y.shape[1], i, j
    cdef double scale = -0.5 / (beta * beta), g
    G_arr = np.empty((m, m), dtype=np.float64)
    cdef double[:, ::1] G = G_arr
    with nogil:
        for i in range(m):
            G[i, i] = 1.0
            for j in range(i + 1, m):
                g = exp(_sq(Y, i, Y, j, D) * scale)
                G[i, j] = g
                G[j, i] = g
    return G_arr


def estep(X, T, log_coef, inv2var, double log_c):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Tv = np.ascontiguousarray(T, dtype=np.float64)
    cdef const double[::1] lc = np.ascontiguousarray(log_coef, dtype=np.float64)
    cdef const double[::1] iv = np.ascontiguousarray(inv2var, dtype=np.float64)
    cdef Py_ssize_t N = Xv.shape[0], m = Tv.shape[0], D = Xv.shape[1], i, j
    P_arr = np.empty((m, N), dtype=np.float64)
    lse_arr = np.empty(N, dtype=np.float64)
    col_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] P = P_arr
    cdef double[::1] lse = lse_arr
    cdef double[::1] col = col_arr
    cdef double amax, s, a, norm
    cdef bint has_c = isfinite(log_c)
    with nogil:
        for i in range(N):
            amax = -INFINITY
            for j in range(m):
                a = lc[j] - _sq(Tv, j, Xv, i, D) * iv[j]
                col[j] = a
                if a > amax:
                    amax = a
            s = 0.0
            for j in range(m):
                s += exp(col[j] - amax)
            norm = amax + log(s)
            if has_c:
                # logaddexp(norm, log_c)
                a = fmax(norm, log_c)
                norm = a + log(exp(norm - a) + exp(log_c - a))
            lse[i] = norm
            for j in range(m):
                P[j, i] = exp(col[j] - norm)
    return P_arr, lse_arr


def mixture_density(Q, C, log_coef, inv2var):
    cdef const double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef const double[:, ::1] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef const double[::1] lc = np.ascontiguousarray(log_coef, dtype=np.float64)
    cdef const double[::1] iv = np.ascontiguousarray(inv2var, dtype=np.float64)
    cdef Py_ssize_t n = Qv.shape[0], m = Cv.shape[0], D = Qv.shape[1], i, j
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += exp(lc[j] - _sq(Cv, j, Qv, i, D) * iv[j])
            out[i] = s
    return out_arr
