# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution data-movement kernels.

Semantics are defined by numpy_backend; arrays returned here are bit-identical
to the fallback (col2im accumulates in the same (i, j) offset order).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    out = np.empty((n * out_h * out_w, c * kh * kw))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, col
    for b in range(n):
        for oh in range(out_h):
            for ow in range(out_w):
                row = (b * out_h + oh) * out_w + ow
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            o[row, col] = xp[b, ch, oh * stride + i, ow * stride + j]
                            col += 1
    return out


def col2im(double[:, ::1] dcols, Py_ssize_t n, Py_ssize_t c,
           Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    out = np.zeros((n, c, hp, wp))
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row
    # (i, j) outermost: overlapping windows must accumulate in the same order
    # as the fallback or the backends drift by rounding.
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    for oh in range(out_h):
                        row = (b * out_h + oh) * out_w
                        for ow in range(out_w):
                            o[b, ch, oh * stride + i, ow * stride + j] += \
                                dcols[row + ow, ch * kh * kw + i * kw + j]
    return out
