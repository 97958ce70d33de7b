# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled brute-force nearest-neighbor kernel.

Mirrors the pure-numpy implementation in ``_kernels_py`` operation for
operation so both backends return bit-identical results (squared distance
accumulated as dx*dx + dy*dy + dz*dz, ties broken to the lowest point index).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def nn_batch(double[:, ::1] points, double[:, ::1] queries):
    """Nearest point index and squared distance for each query row."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t q = queries.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.empty(q, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d2 = np.empty(q, dtype=np.float64)
    cdef cnp.int64_t[::1] idx_v = idx
    cdef double[::1] d2_v = d2
    cdef Py_ssize_t i, j, best_j
    cdef double qx, qy, qz, dx, dy, dz, dist, best

    for i in range(q):
        qx = queries[i, 0]
        qy = queries[i, 1]
        qz = queries[i, 2]
        best = np.inf
        best_j = 0
        for j in range(n):
            dx = points[j, 0] - qx
            dy = points[j, 1] - qy
            dz = points[j, 2] - qz
            dist = dx * dx + dy * dy + dz * dz
            if dist < best:
                best = dist
                best_j = j
        idx_v[i] = best_j
        d2_v[i] = best
    return idx, d2
