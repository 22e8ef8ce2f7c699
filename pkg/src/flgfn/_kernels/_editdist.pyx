# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Levenshtein distance on byte strings (unit insert/delete/substitute costs)."""

import numpy as np

from libc.stdlib cimport malloc, free


cdef Py_ssize_t _lev(const unsigned char[:] a, Py_ssize_t la,
                     const unsigned char[:] b, Py_ssize_t lb,
                     Py_ssize_t* row) noexcept nogil:
    cdef Py_ssize_t i, j, diag, up, best, cost
    for j in range(lb + 1):
        row[j] = j
    for i in range(1, la + 1):
        diag = row[0]
        row[0] = i
        for j in range(1, lb + 1):
            up = row[j]
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = diag + cost
            if up + 1 < best:
                best = up + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
            diag = up
    return row[lb]


def edit_distance(const unsigned char[:] a, const unsigned char[:] b):
    cdef Py_ssize_t lb = b.shape[0]
    cdef Py_ssize_t* row = <Py_ssize_t*> malloc((lb + 1) * sizeof(Py_ssize_t))
    if row == NULL:
        raise MemoryError()
    try:
        return _lev(a, a.shape[0], b, lb, row)
    finally:
        free(row)


def min_edit_distance(const unsigned char[:] x, const unsigned char[:, :] modes):
    """Smallest distance from ``x`` to any row of ``modes``."""
    cdef Py_ssize_t m, d, best = -1
    cdef Py_ssize_t lb = modes.shape[1]
    cdef Py_ssize_t* row = <Py_ssize_t*> malloc((lb + 1) * sizeof(Py_ssize_t))
    if row == NULL:
        raise MemoryError()
    try:
        with nogil:
            for m in range(modes.shape[0]):
                d = _lev(x, x.shape[0], modes[m], lb, row)
                if best < 0 or d < best:
                    best = d
                    if best == 0:
                        break
    finally:
        free(row)
    return best


def min_edit_distance_batch(const unsigned char[:, :] xs, const unsigned char[:, :] modes):
    """Row-wise :func:`min_edit_distance` for equal-length strings ``xs``."""
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t lb = modes.shape[1]
    cdef Py_ssize_t i, m, d, best
    out = np.empty(n, dtype=np.int64)
    cdef long long[:] out_v = out
    cdef Py_ssize_t* row = <Py_ssize_t*> malloc((lb + 1) * sizeof(Py_ssize_t))
    if row == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                best = -1
                for m in range(modes.shape[0]):
                    d = _lev(xs[i], xs.shape[1], modes[m], lb, row)
                    if best < 0 or d < best:
                        best = d
                        if best == 0:
                            break
                out_v[i] = best
    finally:
        free(row)
    return out
