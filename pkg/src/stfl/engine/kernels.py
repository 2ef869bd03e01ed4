"""Convolution lowering kernels with a compiled core and a numpy fallback.

The compiled extension ``stfl.engine._ckernels`` is used when importable.
Set ``STFL_KERNELS=numpy`` to force the pure-numpy path.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from stfl.engine import _ckernels
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None

BACKEND = "cython" if _ckernels is not None and os.environ.get("STFL_KERNELS") != "numpy" else "numpy"


def output_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col_numpy(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = output_extent(h, k, stride, pad), output_extent(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = output_extent(h, k, stride, pad), output_extent(w, k, stride, pad)
    hp = max(h + 2 * pad, stride * (ho - 1) + k)
    wp = max(w + 2 * pad, stride * (wo - 1) + k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += c6[:, :, ki, kj]
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])


def im2col_compiled(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = output_extent(h, k, stride, pad), output_extent(w, k, stride, pad)
    x = np.ascontiguousarray(x)
    out = np.empty((n, c * k * k, ho * wo), dtype=x.dtype)
    _ckernels.im2col(x, out, k, stride, pad, ho, wo)
    return out


def col2im_compiled(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = output_extent(h, k, stride, pad), output_extent(w, k, stride, pad)
    out = np.zeros(shape, dtype=cols.dtype)
    _ckernels.col2im(np.ascontiguousarray(cols), out, k, stride, pad, ho, wo)
    return out


if BACKEND == "cython":
    im2col, col2im = im2col_compiled, col2im_compiled
else:
    im2col, col2im = im2col_numpy, col2im_numpy
