"""Compiled inner loops for affine resampling.

Sampling outside the canvas reads zeros, with bilinear taps blended
continuously across the border.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _tap(src, yi, xi):
    h, w = src.shape
    if 0 <= yi < h and 0 <= xi < w:
        return src[yi, xi]
    return 0.0


@numba.njit(cache=True, inline="always")
def _bilinear(src, X, Y):
    h, w = src.shape
    if X <= -1.0 or Y <= -1.0 or X >= w or Y >= h:
        return 0.0
    x0 = math.floor(X)
    y0 = math.floor(Y)
    fx = X - x0
    fy = Y - y0
    xi = int(x0)
    yi = int(y0)
    v00 = _tap(src, yi, xi)
    v01 = _tap(src, yi, xi + 1)
    v10 = _tap(src, yi + 1, xi)
    v11 = _tap(src, yi + 1, xi + 1)
    return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)


@numba.njit(cache=True)
def affine_bilinear(src, a00, a01, a10, a11, b0, b1):
    h, w = src.shape
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            X = a00 * x + a01 * y + b0
            Y = a10 * x + a11 * y + b1
            out[y, x] = _bilinear(src, X, Y)
    return out


@numba.njit(cache=True)
def affine_nearest(src, a00, a01, a10, a11, b0, b1):
    h, w = src.shape
    out = np.zeros((h, w), dtype=src.dtype)
    for y in range(h):
        for x in range(w):
            X = a00 * x + a01 * y + b0
            Y = a10 * x + a11 * y + b1
            xi = int(math.floor(X + 0.5))
            yi = int(math.floor(Y + 0.5))
            if 0 <= yi < h and 0 <= xi < w:
                out[y, x] = src[yi, xi]
    return out


@numba.njit(cache=True)
def affine_ssd(ref, src, a00, a01, a10, a11, b0, b1, y_lo, y_hi, x_lo, x_hi):
    """Sum of squared differences between ``ref`` and ``src`` resampled
    bilinearly, restricted to rows [y_lo, y_hi) and columns [x_lo, x_hi)."""
    total = 0.0
    for y in range(y_lo, y_hi):
        for x in range(x_lo, x_hi):
            X = a00 * x + a01 * y + b0
            Y = a10 * x + a11 * y + b1
            d = ref[y, x] - _bilinear(src, X, Y)
            total += d * d
    return total
