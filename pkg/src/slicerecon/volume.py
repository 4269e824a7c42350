"""Voxel assembly and physical measurements: PCA axes, extents, volume."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyInput, EmptyVolume, UncalibratedStack
from .types import Mask2D, SliceStack, Volume3D

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PrincipalAxes:
    axes: np.ndarray                  # rows o_1, o_2, o_3
    variances: Tuple[float, float, float]
    degenerate: bool = False

    @property
    def o1(self):
        return self.axes[0]

    @property
    def o2(self):
        return self.axes[1]

    @property
    def o3(self):
        return self.axes[2]

    def to_dict(self) -> dict:
        return {"o1": self.o1.tolist(), "o2": self.o2.tolist(), "o3": self.o3.tolist(),
                "variances": list(self.variances), "degenerate": self.degenerate}


@dataclass(frozen=True)
class Extents:
    L: float
    W: float
    T: float

    def as_tuple(self):
        return self.L, self.W, self.T

    def to_dict(self) -> dict:
        return {"L": self.L, "W": self.W, "T": self.T}


def stack_to_volume(stack: SliceStack, S=None) -> Volume3D:
    """Stack mask slices along z without interpolation.

    In-plane spacing comes from ``S`` (a float or an object with ``.S``),
    falling back on the stack's own recorded scale.
    """
    if stack is None or len(stack) == 0:
        raise EmptyInput("empty stack")
    if not stack.is_mask:
        raise TypeError("stack_to_volume expects mask slices")
    scale = getattr(S, "S", S)
    if scale is None:
        scale = stack.scale
    if scale is None:
        raise UncalibratedStack("no scale factor given and none recorded on the stack")
    data = np.stack([np.asarray(m.data) for m in stack.slices])
    return Volume3D(data, (float(scale), float(scale), float(stack.slice_thickness)))


def foreground_points(v: Volume3D) -> np.ndarray:
    """Physical (x, y, z) coordinates of foreground voxel centres, in mm."""
    z, y, x = np.nonzero(v.data)
    px, py, d = v.spacing
    return np.stack([x * px, y * py, z * d], axis=1).astype(np.float64)


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigenvalues and eigenvectors (columns) of a small symmetric matrix by
    cyclic Jacobi rotations."""
    a = np.array(A, dtype=np.float64)
    n = a.shape[0]
    V = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                a = J.T @ a @ J
                V = V @ J
    return np.diag(a).copy(), V


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(vec)))   # first index wins on ties
    return -vec if vec[k] < 0 else vec


def pca_axes(v: Volume3D, rel_tol: float = 1e-9) -> PrincipalAxes:
    """Principal axes of the foreground voxel cloud, by descending variance.

    Each axis points so that its largest component is positive; the third
    is then set to o_1 x o_2 so the frame is right-handed. Rank-deficient
    clouds keep their valid axes and are completed with coordinate axes.
    """
    pts = foreground_points(v)
    if pts.shape[0] == 0:
        raise EmptyVolume("no foreground voxels")
    if pts.shape[0] == 1:
        logger.warning("single-voxel volume; using coordinate axes")
        return PrincipalAxes(np.eye(3), (0.0, 0.0, 0.0), True)
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred / pts.shape[0]
    vals, vecs = jacobi_eigh(cov)
    # stable sort keeps coordinate order among equal variances
    order = sorted(range(3), key=lambda i: -vals[i])
    vals = vals[order]
    vecs = vecs[:, order].T
    top = max(vals[0], 1e-300)
    rank = int(np.sum(vals > rel_tol * top))
    degenerate = rank < 3
    axes = [_fix_sign(vecs[i]) for i in range(rank)]
    if degenerate:
        logger.warning("covariance has rank %d; completing with coordinate axes", rank)
        for e in np.eye(3):
            if len(axes) == 3:
                break
            w = e - sum(np.dot(e, a) * a for a in axes)
            if np.linalg.norm(w) > 1e-6:
                axes.append(_fix_sign(w / np.linalg.norm(w)))
    o1, o2 = axes[0], axes[1]
    o3 = np.cross(o1, o2)
    frame = np.stack([o1, o2, o3 / np.linalg.norm(o3)])
    gram = frame @ frame.T
    assert np.allclose(gram, np.eye(3), atol=1e-9), "principal axes lost orthonormality"
    return PrincipalAxes(frame, tuple(float(x) for x in np.maximum(vals, 0.0)), degenerate)


def extents(v: Volume3D, axes: PrincipalAxes) -> Extents:
    """max - min of the voxel-centre projections onto each axis, in mm.

    The three spans are reported longest first (L >= W >= T); variance order
    and span order can disagree for thin or irregular shapes.
    """
    pts = foreground_points(v)
    if pts.shape[0] == 0:
        raise EmptyVolume("no foreground voxels")
    proj = pts @ axes.axes.T
    e = sorted((proj.max(axis=0) - proj.min(axis=0)).tolist(), reverse=True)
    return Extents(float(e[0]), float(e[1]), float(e[2]))


def volume_cm3(v: Volume3D) -> float:
    px, py, d = v.spacing
    return int(np.count_nonzero(v.data)) * px * py * d / 1000.0


def measure(v: Volume3D, reference: Optional[Volume3D] = None) -> dict:
    """L, W, T, volume and axes; extents are taken along ``reference``'s axes
    when given, so two volumes can be compared in one frame."""
    axes = pca_axes(reference if reference is not None else v)
    ext = extents(v, axes)
    return {**ext.to_dict(), "volume_cm3": volume_cm3(v), "axes": axes.to_dict()}
