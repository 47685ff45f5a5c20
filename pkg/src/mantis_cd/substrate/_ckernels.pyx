# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels`` (same signatures and layout)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def im2col(double[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t nrow = c * k * k, ncol = b * ho * wo
    out_arr = np.empty((nrow, ncol), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, bi, i, j, row, col, hi
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                col = 0
                for bi in range(b):
                    for i in range(ho):
                        hi = i * stride + ki
                        for j in range(wo):
                            out[row, col] = xp[bi, ci, hi, j * stride + kj]
                            col += 1
    return out_arr


def col2im(double[:, ::1] cols, int b, int c, int hp, int wp, int k, int stride,
           int ho, int wo):
    out_arr = np.zeros((b, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, bi, i, j, row, col, hi
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                col = 0
                for bi in range(b):
                    for i in range(ho):
                        hi = i * stride + ki
                        for j in range(wo):
                            out[bi, ci, hi, j * stride + kj] += cols[row, col]
                            col += 1
    return out_arr


cdef inline void _taps(Py_ssize_t o, Py_ssize_t n, Py_ssize_t* a, Py_ssize_t* nb) nogil:
    # half-pixel centres at scale 2: even outputs lean on the previous sample,
    # odd outputs on the next one, clamped at the edges
    cdef Py_ssize_t m = o >> 1
    a[0] = m
    if o & 1:
        nb[0] = m + 1 if m + 1 < n else n - 1
    else:
        nb[0] = m - 1 if m > 0 else 0


def upsample2x(double[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = np.empty((b, c, 2 * h, 2 * w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, r0, r1, c0, c1
    for bi in range(b):
        for ci in range(c):
            for i in range(2 * h):
                _taps(i, h, &r0, &r1)
                for j in range(2 * w):
                    _taps(j, w, &c0, &c1)
                    out[bi, ci, i, j] = (
                        0.5625 * x[bi, ci, r0, c0] + 0.1875 * x[bi, ci, r0, c1]
                        + 0.1875 * x[bi, ci, r1, c0] + 0.0625 * x[bi, ci, r1, c1]
                    )
    return out_arr


def upsample2x_backward(double[:, :, :, ::1] g):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1]
    cdef Py_ssize_t h = g.shape[2] // 2, w = g.shape[3] // 2
    out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, r0, r1, c0, c1
    cdef double v
    for bi in range(b):
        for ci in range(c):
            for i in range(2 * h):
                _taps(i, h, &r0, &r1)
                for j in range(2 * w):
                    _taps(j, w, &c0, &c1)
                    v = g[bi, ci, i, j]
                    out[bi, ci, r0, c0] += 0.5625 * v
                    out[bi, ci, r0, c1] += 0.1875 * v
                    out[bi, ci, r1, c0] += 0.1875 * v
                    out[bi, ci, r1, c1] += 0.0625 * v
    return out_arr
