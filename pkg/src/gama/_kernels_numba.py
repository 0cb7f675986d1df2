"""Numba implementations of the hot memory-movement kernels.

The gemm that follows im2col runs through BLAS either way; profiling
showed the patch gather/scatter is what dominates, so only that lives
here. Kernels are dtype-generic (float32 for training, float64 for
gradient checking) via lazy specialization.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def im2col(x, kh, kw, stride, pad):
    n, ci, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((ci * kh * kw, n * oh * ow), dtype=x.dtype)
    for ic in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                r = (ic * kh + ky) * kw + kx
                for b in range(n):
                    for oy in range(oh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        cbase = (b * oh + oy) * ow
                        for ox in range(ow):
                            ix = ox * stride + kx - pad
                            if 0 <= ix < w:
                                cols[r, cbase + ox] = x[b, ic, iy, ix]
    return cols


@njit(cache=True, nogil=True)
def col2im_add(gcols, n, ci, h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    gx = np.zeros((n, ci, h, w), dtype=gcols.dtype)
    for ic in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                r = (ic * kh + ky) * kw + kx
                for b in range(n):
                    for oy in range(oh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        cbase = (b * oh + oy) * ow
                        for ox in range(ow):
                            ix = ox * stride + kx - pad
                            if 0 <= ix < w:
                                gx[b, ic, iy, ix] += gcols[r, cbase + ox]
    return gx


@njit(cache=True, nogil=True)
def median_blur(x, window):
    n, c, h, w = x.shape
    half = window // 2
    out = np.empty_like(x)
    buf = np.empty(window * window, dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    k = 0
                    for dy in range(-half, half + 1):
                        sy = min(max(y + dy, 0), h - 1)
                        for dx in range(-half, half + 1):
                            sx = min(max(xx + dx, 0), w - 1)
                            buf[k] = x[b, ch, sy, sx]
                            k += 1
                    # insertion sort; window*window is tiny
                    for i in range(1, k):
                        v = buf[i]
                        j = i - 1
                        while j >= 0 and buf[j] > v:
                            buf[j + 1] = buf[j]
                            j -= 1
                        buf[j + 1] = v
                    out[b, ch, y, xx] = buf[k // 2]
    return out
