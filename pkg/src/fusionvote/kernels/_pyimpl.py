"""Pure-numpy versions of the compiled kernels.

Each function matches the signature and output of its counterpart in
``_cimpl`` so the two can be swapped at import time.
"""

import numpy as np


def im2col(x, k, stride, dilation, padding, out_h, out_w):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty((B, C, k, k, out_h, out_w), dtype=x.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            out[:, :, i, j] = xp[:, :, r0:r0 + stride * out_h:stride, c0:c0 + stride * out_w:stride]
    return out


def col2im(cols, height, width, stride, dilation, padding):
    B, C, k, _, out_h, out_w = cols.shape
    xp = np.zeros((B, C, height + 2 * padding, width + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            xp[:, :, r0:r0 + stride * out_h:stride, c0:c0 + stride * out_w:stride] += cols[:, :, i, j]
    return xp[:, :, padding:padding + height, padding:padding + width].copy()


def warp_nearest(img, inv):
    H, W, _ = img.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    inv = np.asarray(inv, dtype=np.float64)
    fx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    fy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    sx = np.floor(fx + 0.5).astype(np.int64)
    sy = np.floor(fy + 0.5).astype(np.int64)
    valid = (sx >= 0) & (sx < W) & (sy >= 0) & (sy < H)
    out = np.zeros_like(img)
    out[valid] = img[sy[valid], sx[valid]]
    return out
