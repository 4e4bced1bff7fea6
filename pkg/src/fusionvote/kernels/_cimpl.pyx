# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im / nearest-neighbour warp kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


cdef inline void _col_range(Py_ssize_t j, Py_ssize_t Wo, Py_ssize_t W, int stride, int dilation, int padding,
                            Py_ssize_t *lo, Py_ssize_t *hi) noexcept nogil:
    # output columns whose source column j*dilation - padding + ow*stride lies inside [0, W)
    cdef Py_ssize_t off = j * dilation - padding
    lo[0] = 0 if off >= 0 else (-off + stride - 1) // stride
    hi[0] = 0 if W - off <= 0 else (W - off + stride - 1) // stride
    if hi[0] > Wo:
        hi[0] = Wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def _im2col(real[:, :, :, ::1] x, real[:, :, :, :, :, ::1] out,
            int k, int stride, int dilation, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = out.shape[4], Wo = out.shape[5]
    cdef Py_ssize_t b, c, i, j, oh, ow, ih, lo, hi, off
    with nogil:
        for j in range(k):
            _col_range(j, Wo, W, stride, dilation, padding, &lo, &hi)
            off = j * dilation - padding
            for b in range(B):
                for c in range(C):
                    for i in range(k):
                        for oh in range(Ho):
                            ih = oh * stride + i * dilation - padding
                            if ih < 0 or ih >= H:
                                for ow in range(Wo):
                                    out[b, c, i, j, oh, ow] = 0
                                continue
                            for ow in range(lo):
                                out[b, c, i, j, oh, ow] = 0
                            for ow in range(lo, hi):
                                out[b, c, i, j, oh, ow] = x[b, c, ih, ow * stride + off]
                            for ow in range(hi, Wo):
                                out[b, c, i, j, oh, ow] = 0


def _col2im(real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] out,
            int stride, int dilation, int padding):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t k = cols.shape[2], Ho = cols.shape[4], Wo = cols.shape[5]
    cdef Py_ssize_t b, c, i, j, oh, ow, ih, lo, hi, off
    with nogil:
        for j in range(k):
            _col_range(j, Wo, W, stride, dilation, padding, &lo, &hi)
            off = j * dilation - padding
            for b in range(B):
                for c in range(C):
                    for i in range(k):
                        for oh in range(Ho):
                            ih = oh * stride + i * dilation - padding
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(lo, hi):
                                out[b, c, ih, ow * stride + off] += cols[b, c, i, j, oh, ow]


def im2col(x, int k, int stride, int dilation, int padding, int out_h, int out_w):
    x = np.ascontiguousarray(x)
    out = np.empty((x.shape[0], x.shape[1], k, k, out_h, out_w), dtype=x.dtype)
    _im2col(x, out, k, stride, dilation, padding)
    return out


def col2im(cols, int height, int width, int stride, int dilation, int padding):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], cols.shape[1], height, width), dtype=cols.dtype)
    _col2im(cols, out, stride, dilation, padding)
    return out


def _warp(real[:, :, ::1] img, real[:, :, ::1] out, double[:, ::1] inv):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], C = img.shape[2]
    cdef Py_ssize_t y, x, c, sy, sx
    cdef double fx, fy
    with nogil:
        for y in range(H):
            for x in range(W):
                fx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]
                fy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]
                sx = <Py_ssize_t>floor(fx + 0.5)
                sy = <Py_ssize_t>floor(fy + 0.5)
                if sx < 0 or sx >= W or sy < 0 or sy >= H:
                    for c in range(C):
                        out[y, x, c] = 0
                else:
                    for c in range(C):
                        out[y, x, c] = img[sy, sx, c]


def warp_nearest(img, inv):
    img = np.ascontiguousarray(img)
    inv = np.ascontiguousarray(inv, dtype=np.float64)
    out = np.empty_like(img)
    _warp(img, out, inv)
    return out
