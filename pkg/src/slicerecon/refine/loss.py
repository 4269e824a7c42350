"""Unsupervised registration loss: negative local NCC plus diffusion smoothness.

All functions here work on float64 arrays; the analytic gradient of the
loss with respect to the displacement field is hand-derived so it can be
checked against finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi

from ..errors import ShapeError
from ..types import DisplacementField
from .warp import warp_array

VARIANCE_FLOOR = 1e-10


def _arr(x) -> np.ndarray:
    if hasattr(x, "astype_float"):
        return x.astype_float()
    return np.asarray(x, dtype=np.float64)


def _phi(phi) -> np.ndarray:
    if isinstance(phi, DisplacementField):
        return phi.as_array()
    return np.asarray(phi, dtype=np.float64)


def _box(x: np.ndarray, window: int) -> np.ndarray:
    # zero-padded window sum; symmetric, so it is its own adjoint
    return ndi.uniform_filter(x, size=window, mode="constant", cval=0.0) * float(window * window)


def _ncc_parts(I: np.ndarray, J: np.ndarray, window: int):
    # windows are clipped to the canvas: n counts the in-canvas pixels
    n = _box(np.ones_like(I), window)
    SI = _box(I, window)
    SJ = _box(J, window)
    SII = _box(I * I, window)
    SJJ = _box(J * J, window)
    SIJ = _box(I * J, window)
    cross = SIJ - SI * SJ / n
    vI = SII - SI * SI / n
    vJ = SJJ - SJ * SJ / n
    valid = (vI / n >= VARIANCE_FLOOR) & (vJ / n >= VARIANCE_FLOOR)
    denom = np.sqrt(np.where(valid, vI * vJ, 1.0))
    cc = np.where(valid, cross / denom, 0.0)
    return cc, valid, denom, SI, SJ, vJ, n


def local_ncc(a, b, window: int = 9) -> float:
    """Mean windowed zero-mean normalized cross-correlation, in [-1, 1].

    The mean runs over windows whose intensity variance is at least 1e-10
    in both images; flat windows carry no correlation and are left out.
    Windows are clipped at the border, so the value is exactly invariant
    to positive affine intensity changes.
    """
    I, J = _arr(a), _arr(b)
    if I.shape != J.shape:
        raise ShapeError(f"shapes differ: {I.shape} vs {J.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    cc, valid, *_ = _ncc_parts(I, J, window)
    count = int(valid.sum())
    if count == 0:
        return 0.0
    return float(np.clip(cc.sum() / count, -1.0, 1.0))


def local_ncc_grad(I: np.ndarray, J: np.ndarray, window: int):
    """Value of :func:`local_ncc` and its gradient with respect to ``J``."""
    cc, valid, denom, SI, SJ, vJ, n = _ncc_parts(I, J, window)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(J)
    A = np.where(valid, 1.0 / denom, 0.0)
    safe_vJ = np.where(valid, vJ, 1.0)
    B = np.where(valid, -SI * A / n + cc * SJ / (n * safe_vJ), 0.0)
    C = np.where(valid, -cc / (2.0 * safe_vJ), 0.0)
    g = _box(B, window) + 2.0 * J * _box(C, window) + I * _box(A, window)
    return float(cc.sum() / count), g / count


def smoothness(phi) -> float:
    """Diffusion regularizer: mean over the u and v channels of the mean
    squared forward differences along x plus along y."""
    p = _phi(phi)
    total = 0.0
    for c in p:
        dx = np.diff(c, axis=1)
        dy = np.diff(c, axis=0)
        total += (np.mean(dx * dx) if dx.size else 0.0) + (np.mean(dy * dy) if dy.size else 0.0)
    return total / p.shape[0]


def smoothness_grad(p: np.ndarray) -> np.ndarray:
    g = np.zeros_like(p)
    nch = p.shape[0]
    for k, c in enumerate(p):
        dx = np.diff(c, axis=1)
        dy = np.diff(c, axis=0)
        if dx.size:
            t = 2.0 * dx / (dx.size * nch)
            g[k][:, 1:] += t
            g[k][:, :-1] -= t
        if dy.size:
            t = 2.0 * dy / (dy.size * nch)
            g[k][1:, :] += t
            g[k][:-1, :] -= t
    return g


def loss_us(fixed, moving, phi, lam: float, window: int = 9) -> float:
    """-local_ncc(fixed, moving warped by phi) + lam * smoothness(phi)."""
    I, M, p = _arr(fixed), _arr(moving), _phi(phi)
    if I.shape != M.shape or p.shape[1:] != I.shape:
        raise ShapeError("fixed, moving and field dimensions must agree")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    return -local_ncc(I, warp_array(M, p), window) + lam * smoothness(p)


def loss_and_grad(I: np.ndarray, M: np.ndarray, p: np.ndarray, lam: float, window: int = 9):
    """Loss and its analytic gradient with respect to the ``(2, H, W)`` field."""
    J, dJdx, dJdy = warp_array(M, p, grad=True)
    ncc, gJ = local_ncc_grad(I, J, window)
    grad = np.empty_like(p)
    grad[0] = -gJ * dJdx
    grad[1] = -gJ * dJdy
    if lam:
        grad += lam * smoothness_grad(p)
    return -ncc + lam * smoothness(p), grad
