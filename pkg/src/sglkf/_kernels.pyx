# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: pairwise IoU and linear assignment.

Behaviour matches ``_kernels_py`` exactly; see that module for the contract.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fmin, fmax

cnp.import_array()


def iou_matrix_2d(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double ax0, ax1, ay0, ay1, area_a, iw, ih, inter
    for i in range(n):
        ax0 = A[i, 0] - A[i, 2] / 2
        ax1 = A[i, 0] + A[i, 2] / 2
        ay0 = A[i, 1] - A[i, 3] / 2
        ay1 = A[i, 1] + A[i, 3] / 2
        area_a = A[i, 2] * A[i, 3]
        for j in range(m):
            iw = fmin(ax1, B[j, 0] + B[j, 2] / 2) - fmax(ax0, B[j, 0] - B[j, 2] / 2)
            if iw <= 0:
                continue
            ih = fmin(ay1, B[j, 1] + B[j, 3] / 2) - fmax(ay0, B[j, 1] - B[j, 3] / 2)
            if ih <= 0:
                continue
            inter = iw * ih
            O[i, j] = fmin(inter / (area_a + B[j, 2] * B[j, 3] - inter), 1.0)
    return out


def iou_matrix_3d(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 6)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 6)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j, k
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double inter, side, vol_a
    for i in range(n):
        vol_a = A[i, 3] * A[i, 4] * A[i, 5]
        for j in range(m):
            inter = 1.0
            for k in range(3):
                side = (fmin(A[i, k] + A[i, k + 3] / 2, B[j, k] + B[j, k + 3] / 2)
                        - fmax(A[i, k] - A[i, k + 3] / 2, B[j, k] - B[j, k + 3] / 2))
                if side <= 0:
                    inter = 0.0
                    break
                inter *= side
            if inter > 0:
                O[i, j] = fmin(inter / (vol_a + B[j, 3] * B[j, 4] * B[j, 5] - inter), 1.0)
    return out


cdef _lsa_wide(double[:, ::1] cost):
    cdef Py_ssize_t n = cost.shape[0], m = cost.shape[1]
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows = np.empty(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t k = 0
    for j in range(1, m + 1):
        if p[j]:
            rows[k] = p[j] - 1
            cols[k] = j - 1
            k += 1
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def linear_sum_assignment(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    n, m = cost.shape
    if n == 0 or m == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if n <= m:
        return _lsa_wide(np.ascontiguousarray(cost))
    cols, rows = _lsa_wide(np.ascontiguousarray(cost.T))
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]
