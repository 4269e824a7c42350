"""Shared value types and elementary mask utilities.

Rasters are stored as 2D numpy arrays indexed ``[y, x]`` (row-major, origin
top-left, y pointing down). Pixel centers sit at integer coordinates. All
types are immutable after construction: the wrapped arrays are flagged
read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EmptyMask, InvalidTransform, ShapeError

Spacing = Tuple[float, float]


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def _check_spacing(spacing, n) -> tuple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != n or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be {n} positive finite values, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Image2D:
    """Scalar raster with intensities in [0, 1]."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"Image2D needs a 2D array, got shape {data.shape}")
        data = _frozen(data, np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("Image2D intensities must be finite")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("Image2D intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 2))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def astype_float(self) -> np.ndarray:
        return self.data.astype(np.float64)


@dataclass(frozen=True, eq=False)
class Mask2D:
    """Binary raster."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"Mask2D needs a 2D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data != 0, bool))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 2))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def astype_float(self) -> np.ndarray:
        return self.data.astype(np.float64)


Raster = Union[Image2D, Mask2D]


def like(template: Raster, data: np.ndarray) -> Raster:
    """Build a raster of the same kind and spacing as ``template``."""
    if isinstance(template, Mask2D):
        return Mask2D(data, template.spacing)
    return Image2D(np.clip(data, 0.0, 1.0), template.spacing)


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform scale, rotation (radians) and translation (pixels).

    Maps an input point ``p`` to ``s * R(theta) @ (p - c) + c + t`` where
    ``c`` is the image center.
    """

    s: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.s, self.theta, self.tx, self.ty)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidTransform(f"non-finite transform parameters {vals}")
        if self.s <= 0:
            raise InvalidTransform(f"scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def is_identity(self) -> bool:
        return self.s == 1.0 and self.theta == 0.0 and self.tx == 0.0 and self.ty == 0.0

    def inverse(self) -> "SimilarityTransform":
        c, s = math.cos(self.theta), math.sin(self.theta)
        # t' = -R(-theta) t / s
        tx = -(c * self.tx + s * self.ty) / self.s
        ty = -(-s * self.tx + c * self.ty) / self.s
        return SimilarityTransform(1.0 / self.s, -self.theta, tx, ty)

    def forward_matrix(self) -> np.ndarray:
        """2x2 linear part ``s * R(theta)`` acting on (x, y)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.s * np.array([[c, -s], [s, c]])

    def to_dict(self) -> dict:
        return {"s": self.s, "theta_deg": math.degrees(self.theta), "tx": self.tx, "ty": self.ty}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        theta = math.radians(d["theta_deg"]) if "theta_deg" in d else d.get("theta", 0.0)
        return cls(d.get("s", 1.0), theta, d.get("tx", 0.0), d.get("ty", 0.0))


PARAM_NAMES = ("s", "theta", "tx", "ty")
Bound = Tuple[Optional[float], Optional[float]]


@dataclass(frozen=True)
class ParameterBounds:
    """Optional lower/upper bound per similarity parameter (theta in radians)."""

    s: Bound = (None, None)
    theta: Bound = (None, None)
    tx: Bound = (None, None)
    ty: Bound = (None, None)

    def __post_init__(self):
        for name in PARAM_NAMES:
            lb, ub = getattr(self, name)
            lb = None if lb is None else float(lb)
            ub = None if ub is None else float(ub)
            if lb is not None and ub is not None and lb > ub:
                raise ValueError(f"bound for {name}: lower {lb} > upper {ub}")
            object.__setattr__(self, name, (lb, ub))

    @classmethod
    def defaults(cls, width: int, height: int) -> "ParameterBounds":
        """Bounds used for macroscopic slices: s in [0.8, 1.2], theta in +-45 deg,
        translation within half the image size."""
        return cls(
            s=(0.8, 1.2),
            theta=(-math.pi / 4, math.pi / 4),
            tx=(-width / 2, width / 2),
            ty=(-height / 2, height / 2),
        )

    @classmethod
    def identity(cls) -> "ParameterBounds":
        return cls(s=(1.0, 1.0), theta=(0.0, 0.0), tx=(0.0, 0.0), ty=(0.0, 0.0))

    def get(self, name: str) -> Bound:
        return getattr(self, name)

    def is_fixed(self, name: str) -> bool:
        lb, ub = self.get(name)
        return lb is not None and lb == ub

    def contains(self, t: SimilarityTransform, tol: float = 0.0) -> bool:
        for name in PARAM_NAMES:
            lb, ub = self.get(name)
            v = getattr(t, name)
            if lb is not None and v < lb - tol:
                return False
            if ub is not None and v > ub + tol:
                return False
        return True

    def to_dict(self) -> dict:
        out = {}
        for name in PARAM_NAMES:
            lb, ub = self.get(name)
            if name == "theta":
                out["theta_deg"] = [None if lb is None else math.degrees(lb),
                                    None if ub is None else math.degrees(ub)]
            else:
                out[name] = [lb, ub]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterBounds":
        kw = {}
        for name in PARAM_NAMES:
            if name == "theta" and "theta_deg" in d:
                lb, ub = d["theta_deg"]
                kw["theta"] = (None if lb is None else math.radians(lb),
                               None if ub is None else math.radians(ub))
            elif name in d:
                kw[name] = tuple(d[name])
        return cls(**kw)


@dataclass(frozen=True)
class SliceStack:
    """Ordered slices sharing dimensions and spacing."""

    slices: Tuple[Raster, ...]
    slice_thickness: float
    scale: Optional[float] = None

    def __post_init__(self):
        slices = tuple(self.slices)
        if not slices:
            raise ValueError("a SliceStack needs at least one slice")
        first = slices[0]
        for sl in slices[1:]:
            if sl.shape != first.shape or sl.spacing != first.spacing:
                raise ShapeError("all slices must share dimensions and spacing")
            if type(sl) is not type(first):
                raise ValueError("a SliceStack cannot mix images and masks")
        if not (self.slice_thickness > 0 and math.isfinite(self.slice_thickness)):
            raise ValueError("slice_thickness must be positive")
        if self.scale is not None and not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive")
        object.__setattr__(self, "slices", slices)

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i):
        return self.slices[i]

    def __iter__(self):
        return iter(self.slices)

    @property
    def is_mask(self) -> bool:
        return isinstance(self.slices[0], Mask2D)

    @property
    def shape(self):
        return self.slices[0].shape

    @property
    def spacing(self) -> Spacing:
        return self.slices[0].spacing

    def replace(self, slices: Sequence[Raster]) -> "SliceStack":
        return SliceStack(tuple(slices), self.slice_thickness, self.scale)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Binary voxel grid stored as ``data[z, y, x]``; spacing is (p_x, p_y, d) in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"Volume3D needs a 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data != 0, bool))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, 3))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-pixel displacement (u along x, v along y) in pixels, pull-back convention."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u)
        v = np.asarray(self.v)
        if u.ndim != 2 or u.shape != v.shape:
            raise ShapeError(f"u and v must be equal-shape 2D arrays, got {u.shape}, {v.shape}")
        u = _frozen(u, np.float32)
        v = _frozen(v, np.float32)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("displacement field must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def from_array(cls, phi: np.ndarray) -> "DisplacementField":
        return cls(phi[0], phi[1])

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self):
        return self.u.shape

    def as_array(self) -> np.ndarray:
        """Stacked ``(2, H, W)`` float64 copy."""
        return np.stack([self.u, self.v]).astype(np.float64)

    def max_magnitude(self) -> float:
        return float(np.sqrt(self.u.astype(np.float64) ** 2 + self.v.astype(np.float64) ** 2).max(initial=0.0))


def mask_area(m: Mask2D) -> int:
    return int(np.count_nonzero(m.data))


def centroid(m: Mask2D) -> Tuple[float, float]:
    """Mean (x, y) of the true pixels."""
    ys, xs = np.nonzero(m.data)
    if xs.size == 0:
        raise EmptyMask("centroid of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())


def image_center(shape) -> Tuple[float, float]:
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0
