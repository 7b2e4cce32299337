# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel for directed nearest-surface distances."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt


def directed_min_distances(a, b):
    """For each point in ``a`` (N, 3), the Euclidean distance to the nearest
    point in ``b`` (M, 3)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.ascontiguousarray(b, dtype=np.float64)
    if bb.shape[0] == 0:
        raise ValueError("reference point set is empty")
    cdef Py_ssize_t n = aa.shape[0]
    cdef Py_ssize_t m = bb.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, d2, best
    for i in range(n):
        best = -1.0
        for j in range(m):
            dx = aa[i, 0] - bb[j, 0]
            dy = aa[i, 1] - bb[j, 1]
            dz = aa[i, 2] - bb[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if best < 0.0 or d2 < best:
                best = d2
        out[i] = sqrt(best)
    return out
