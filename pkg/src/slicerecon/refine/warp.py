"""Dense (pull-back) warping with zero-padded bilinear sampling."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..types import DisplacementField, Image2D, Mask2D, Raster

_PAD = 2


def bilinear(src: np.ndarray, X: np.ndarray, Y: np.ndarray, grad: bool = False):
    """Sample ``src`` at real coordinates (X, Y); off-canvas taps read zero.

    With ``grad=True`` also returns the partial derivatives of the sampled
    values with respect to X and Y (zero wherever every tap is off-canvas).
    """
    h, w = src.shape
    padded = np.pad(np.asarray(src, dtype=np.float64), _PAD)
    # beyond these limits every tap already lies in the zero padding
    Xc = np.clip(X, -_PAD, w + 0.5)
    Yc = np.clip(Y, -_PAD, h + 0.5)
    x0 = np.floor(Xc)
    y0 = np.floor(Yc)
    fx = Xc - x0
    fy = Yc - y0
    xi = x0.astype(np.intp) + _PAD
    yi = y0.astype(np.intp) + _PAD
    v00 = padded[yi, xi]
    v01 = padded[yi, xi + 1]
    v10 = padded[yi + 1, xi]
    v11 = padded[yi + 1, xi + 1]
    top = (1.0 - fx) * v00 + fx * v01
    bottom = (1.0 - fx) * v10 + fx * v11
    out = (1.0 - fy) * top + fy * bottom
    if not grad:
        return out
    dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = bottom - top
    return out, dx, dy


def sample_grid(shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx, yy


def warp_array(src: np.ndarray, phi: np.ndarray, grad: bool = False):
    """Warp a float array by a ``(2, H, W)`` displacement: out(p) = src(p + phi(p))."""
    xx, yy = sample_grid(src.shape)
    return bilinear(src, xx + phi[0], yy + phi[1], grad=grad)


def warp_dense(img: Raster, phi: DisplacementField) -> Raster:
    """Pull-back warp of an image or mask.

    Masks are sampled as real values and thresholded at 0.5.
    """
    if img.shape != phi.shape:
        raise ShapeError(f"field {phi.shape} does not match raster {img.shape}")
    out = warp_array(img.astype_float(), phi.as_array())
    if isinstance(img, Mask2D):
        return Mask2D(out >= 0.5, img.spacing)
    return Image2D(np.clip(out, 0.0, 1.0), img.spacing)


def jacobian_determinant(phi: np.ndarray) -> np.ndarray:
    """Determinant of the Jacobian of p -> p + phi(p) (central differences)."""
    du_dy, du_dx = np.gradient(phi[0])
    dv_dy, dv_dx = np.gradient(phi[1])
    return (1.0 + du_dx) * (1.0 + dv_dy) - du_dy * dv_dx


def fold_fraction(phi) -> float:
    """Fraction of pixels where the warp folds (negative Jacobian determinant)."""
    arr = phi.as_array() if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    return float(np.mean(jacobian_determinant(arr) < 0.0))
