# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: im2col / col2im packing and 2x2 max pooling.

Single-pass C loops; same call signatures and float32/float64 support as
the numpy fallback module.
"""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c * k * k, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, oy, ox, iy, ix, row
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ci * k + i) * k + j
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                out[bi, row, oy * wo + ox] = x[bi, ci, iy, ix]
    return out_arr


def col2im(real[:, :, ::1] cols, int n, int c, int h, int w,
           int k, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, oy, ox, iy, ix, row
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ci * k + i) * k + j
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                out[bi, ci, iy, ix] += cols[bi, row, oy * wo + ox]
    return out_arr


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t bi, ci, oy, ox, i, j, best_idx
    cdef real v, best
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = x[bi, ci, 2 * oy, 2 * ox]
                        best_idx = 0
                        for i in range(2):
                            for j in range(2):
                                v = x[bi, ci, 2 * oy + i, 2 * ox + j]
                                if v > best:
                                    best = v
                                    best_idx = 2 * i + j
                        out[bi, ci, oy, ox] = best
                        arg[bi, ci, oy, ox] = best_idx
    return out_arr, arg_arr


def maxpool2x2_backward(real[:, :, :, ::1] gout, cnp.int64_t[:, :, :, ::1] arg,
                        int h, int w):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, ci, oy, ox, a
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        a = arg[bi, ci, oy, ox]
                        gx[bi, ci, 2 * oy + a // 2, 2 * ox + a % 2] += gout[bi, ci, oy, ox]
    return gx_arr
