# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels.

Semantics mirror _geom_np exactly: float64 squared distances accumulated as
dx*dx + dy*dy + dz*dz, ties to the lowest index, so the two backends return
bit-identical index sequences.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF INF = 1.7976931348623157e308


def fps_indices(double[:, ::1] pts, Py_ssize_t m, Py_ssize_t start):
    cdef Py_ssize_t n = pts.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] sel_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] sel = sel_arr
    cdef double[::1] best = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, nxt
    cdef double cx, cy, cz, dx, dy, dz, d, top

    sel[0] = start
    if m == 1:
        return sel_arr
    cx = pts[start, 0]; cy = pts[start, 1]; cz = pts[start, 2]
    for j in range(n):
        dx = pts[j, 0] - cx
        dy = pts[j, 1] - cy
        dz = pts[j, 2] - cz
        best[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, m):
        nxt = 0
        top = best[0]
        for j in range(1, n):
            if best[j] > top:  # strict: first max wins, lowest index
                top = best[j]
                nxt = j
        sel[i] = nxt
        cx = pts[nxt, 0]; cy = pts[nxt, 1]; cz = pts[nxt, 2]
        for j in range(n):
            dx = pts[j, 0] - cx
            dy = pts[j, 1] - cy
            dz = pts[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < best[j]:
                best[j] = d
    return sel_arr


def knn_indices(double[:, ::1] pts, long long[::1] center_idx, Py_ssize_t k):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t m = center_idx.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out_arr = np.empty((m, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef double[::1] d = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t row, i, j, ci, argmin
    cdef double cx, cy, cz, dx, dy, dz, low

    for row in range(m):
        ci = center_idx[row]
        cx = pts[ci, 0]; cy = pts[ci, 1]; cz = pts[ci, 2]
        for j in range(n):
            dx = pts[j, 0] - cx
            dy = pts[j, 1] - cy
            dz = pts[j, 2] - cz
            d[j] = dx * dx + dy * dy + dz * dz
        for i in range(k):
            argmin = 0
            low = INF
            for j in range(n):
                if d[j] < low:  # strict: first min wins, lowest index
                    low = d[j]
                    argmin = j
            out[row, i] = argmin
            d[argmin] = INF
    return out_arr
