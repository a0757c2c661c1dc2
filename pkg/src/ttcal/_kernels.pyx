# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics mirror ``ttcal._pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def pairwise_distances(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t dim = x.shape[1]
    cdef Py_ssize_t i, j, k, pos = 0
    cdef double acc, diff
    out_arr = np.empty(n * (n - 1) // 2, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(dim):
                diff = x[i, k] - x[j, k]
                acc = acc + diff * diff
            acc = sqrt(acc)
            if acc > 2.0:
                acc = 2.0
            out[pos] = acc
            pos += 1
    return out_arr


cdef inline Py_ssize_t _count_le(const double[::1] grid, double v) nogil:
    # number of grid points <= v
    cdef Py_ssize_t lo = 0, hi = grid.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if grid[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _count_lt(const double[::1] grid, double v) nogil:
    # number of grid points < v
    cdef Py_ssize_t lo = 0, hi = grid.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if grid[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


def threshold_counts(const double[::1] dist, const unsigned char[::1] positive,
                     const double[::1] grid):
    cdef Py_ssize_t m = dist.shape[0]
    cdef Py_ssize_t g = grid.shape[0]
    cdef Py_ssize_t i, k
    cdef long long n_pos = 0, n_neg = 0, run
    hp_arr = np.zeros(g + 1, dtype=np.int64)
    hn_arr = np.zeros(g + 1, dtype=np.int64)
    cdef long long[::1] hp = hp_arr
    cdef long long[::1] hn = hn_arr
    with nogil:
        for i in range(m):
            if positive[i]:
                hp[_count_le(grid, dist[i])] += 1
                n_pos += 1
            else:
                hn[_count_lt(grid, dist[i])] += 1
                n_neg += 1
    pos_below_arr = np.empty(g, dtype=np.int64)
    neg_above_arr = np.empty(g, dtype=np.int64)
    cdef long long[::1] pos_below = pos_below_arr
    cdef long long[::1] neg_above = neg_above_arr
    run = 0
    for k in range(g):
        run += hp[k]
        pos_below[k] = run
    run = 0
    for k in range(g):
        run += hn[k]
        neg_above[k] = n_neg - run
    return pos_below_arr, neg_above_arr, n_pos, n_neg


def pava(const double[::1] y, const double[::1] w):
    """Weighted pool-adjacent-violators; returns the fitted values."""
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t i, b = 0, k, start
    val_arr = np.empty(n, dtype=np.float64)
    wt_arr = np.empty(n, dtype=np.float64)
    end_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] val = val_arr
    cdef double[::1] wt = wt_arr
    cdef Py_ssize_t[::1] end = end_arr
    cdef double nw
    for i in range(n):
        val[b] = y[i]
        wt[b] = w[i]
        end[b] = i
        while b > 0 and val[b - 1] > val[b]:
            nw = wt[b - 1] + wt[b]
            val[b - 1] = (wt[b - 1] * val[b - 1] + wt[b] * val[b]) / nw
            wt[b - 1] = nw
            end[b - 1] = end[b]
            b -= 1
        b += 1
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    start = 0
    for k in range(b):
        for i in range(start, end[k] + 1):
            out[i] = val[k]
        start = end[k] + 1
    return out_arr


def pair_mlp_forward(const double[:, ::1] u, const double[:, ::1] v, const double[::1] b1,
                     const double[::1] w2, double b2):
    """``logit[i, j] = w2 . relu(u[i] + v[j] + b1) + b2`` without an n x n x M buffer."""
    cdef Py_ssize_t n = u.shape[0], m = u.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double a, w, h
    vt_arr = np.ascontiguousarray(np.asarray(v).T)
    cdef double[:, ::1] vt = vt_arr
    out_arr = np.full((n, n), b2, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double* row
    cdef const double* vk
    with nogil:
        for i in range(n):
            row = &out[i, 0]
            for k in range(m):
                a = u[i, k] + b1[k]
                w = w2[k]
                vk = &vt[k, 0]
                # j innermost: independent accumulators, so the loop vectorises
                for j in range(n):
                    h = a + vk[j]
                    row[j] += w * (h if h > 0.0 else 0.0)
    return out_arr


def pair_mlp_backward(const double[:, ::1] u, const double[:, ::1] v, const double[::1] b1,
                      const double[::1] w2, const double[:, ::1] dlogit):
    """Gradients of ``sum(dlogit * logit)`` w.r.t. ``u``, ``v``, ``b1`` and ``w2``."""
    cdef Py_ssize_t n = u.shape[0], m = u.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double a, w, h, g, s_h, s_g
    vt_arr = np.ascontiguousarray(np.asarray(v).T)
    cdef double[:, ::1] vt = vt_arr
    du_arr = np.zeros((n, m), dtype=np.float64)
    dvt_arr = np.zeros((m, n), dtype=np.float64)
    dw2_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] du = du_arr
    cdef double[:, ::1] dvt = dvt_arr
    cdef double[::1] dw2 = dw2_arr
    cdef const double* grow
    cdef const double* vk
    cdef double* dvk
    with nogil:
        for i in range(n):
            grow = &dlogit[i, 0]
            for k in range(m):
                a = u[i, k] + b1[k]
                w = w2[k]
                vk = &vt[k, 0]
                dvk = &dvt[k, 0]
                s_h = 0.0
                s_g = 0.0
                for j in range(n):
                    h = a + vk[j]
                    g = grow[j] if h > 0.0 else 0.0
                    s_h += g * h
                    s_g += g
                    dvk[j] += g * w
                dw2[k] += s_h
                du[i, k] = s_g * w
    # b1 enters every pre-activation exactly like u, so its gradient is du summed
    return du_arr, np.ascontiguousarray(dvt_arr.T), du_arr.sum(axis=0), dw2_arr
