"""Hot-path kernels with two interchangeable backends.

`GAMA_KERNELS=numba` (default when numba imports) routes the im2col /
col2im patch movement and the sliding median through compiled loops;
`GAMA_KERNELS=numpy` uses pad-and-window views instead. Both produce
the same values; `benchmarks/kernel_bench.py` compares them.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

try:
    from . import _kernels_numba as _nb
    _HAS_NUMBA = True
except ImportError:
    _nb = None
    _HAS_NUMBA = False

_ENV_FLAG = "GAMA_KERNELS"


def _pick_backend() -> str:
    req = os.environ.get(_ENV_FLAG, "").strip().lower()
    if req == "":
        return "numba" if _HAS_NUMBA else "numpy"
    if req == "numba":
        if not _HAS_NUMBA:
            raise ConfigError(f"{_ENV_FLAG}=numba requested but numba is not importable")
        return "numba"
    if req == "numpy":
        return "numpy"
    raise ConfigError(f"{_ENV_FLAG} must be 'numba' or 'numpy', got {req!r}")


_BACKEND = _pick_backend()


def backend_name() -> str:
    return _BACKEND


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
                         f"stride {stride}, pad {pad}")
    return oh, ow


def _im2col_numpy(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, ci, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ci, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride]
    # (ci*kh*kw, n*oh*ow) with rows ordered (ic, ky, kx)
    return np.ascontiguousarray(
        cols.transpose(1, 2, 3, 0, 4, 5).reshape(ci * kh * kw, n * oh * ow))


def _col2im_add_numpy(gcols: np.ndarray, n: int, ci: int, h: int, w: int,
                      kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    oh, ow = conv_out_hw(h, w, kh, kw, stride, pad)
    gp = np.zeros((n, ci, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    g6 = gcols.reshape(ci, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    for ky in range(kh):
        for kx in range(kw):
            gp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride] += g6[:, :, ky, kx]
    if pad:
        return np.ascontiguousarray(gp[:, :, pad:pad + h, pad:pad + w])
    return gp


def _median_blur_numpy(x: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    xp = np.pad(x, ((0, 0), (0, 0), (half, half), (half, half)), mode="edge")
    n, c, h, w = x.shape
    stack = np.empty((window * window,) + x.shape, dtype=x.dtype)
    k = 0
    for dy in range(window):
        for dx in range(window):
            stack[k] = xp[:, :, dy:dy + h, dx:dx + w]
            k += 1
    return np.median(stack, axis=0).astype(x.dtype)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv patches: (n,ci,h,w) -> (ci*kh*kw, n*oh*ow)."""
    if _BACKEND == "numba":
        return _nb.im2col(x, kh, kw, stride, pad)
    return _im2col_numpy(x, kh, kw, stride, pad)


def col2im_add(gcols: np.ndarray, x_shape: tuple, kh: int, kw: int,
               stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch gradients back to image layout."""
    n, ci, h, w = x_shape
    if _BACKEND == "numba":
        return _nb.col2im_add(gcols, n, ci, h, w, kh, kw, stride, pad)
    return _col2im_add_numpy(gcols, n, ci, h, w, kh, kw, stride, pad)


def median_blur(x: np.ndarray, window: int = 3) -> np.ndarray:
    """Per-channel sliding median with edge-replicate padding.

    `window` must be odd and >= 3; x is (n,c,h,w).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if x.ndim != 4:
        raise ValueError(f"expected (n,c,h,w), got shape {x.shape}")
    if _BACKEND == "numba":
        return _nb.median_blur(x, window)
    return _median_blur_numpy(x, window)
