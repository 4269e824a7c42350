"""Synthetic kidney-like slice stacks with known perturbations.

The solid is a superellipsoid cut into parallel slabs. Each slice is a
superellipse with a notch on one flank (the "hilum") so that no rotation
inside the registration bounds maps the contour onto itself. Every slice
after the first is perturbed by the inverse of a sampled similarity
transform and, optionally, a smooth random displacement field.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.special import gamma

from .errors import InvalidConfig
from .ocm import warp_similarity
from .refine.warp import warp_dense
from .types import DisplacementField, Mask2D, ParameterBounds, SimilarityTransform, SliceStack


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 128
    n_slices: int = 10
    semi_axes_mm: Tuple[float, float] = (40.0, 25.0)
    exponent: float = 2.5                 # in-plane superellipse exponent
    axial_exponent: float = 6.0           # superellipsoid exponent along the stack axis
    axial_extent: float = 0.5             # fraction of the axial half-length spanned by the slices
    hilum_fraction: float = 0.35          # notch radius relative to the short semi-axis
    spacing_mm: float = 1.0
    slice_thickness_mm: float = 4.0
    bounds: Optional[ParameterBounds] = None
    amplitude: float = 0.0
    control_points: int = 5
    seed: int = 0

    def perturbation_bounds(self) -> ParameterBounds:
        if self.bounds is not None:
            return self.bounds
        t = self.size / 10.0
        return ParameterBounds(s=(0.8, 1.2), theta=(-math.pi / 4, math.pi / 4), tx=(-t, t), ty=(-t, t))

    def validate(self) -> None:
        if self.size < 8 or self.n_slices < 1:
            raise InvalidConfig("size must be >= 8 and n_slices >= 1")
        if min(self.semi_axes_mm) <= 0 or self.exponent <= 0 or self.axial_exponent <= 0:
            raise InvalidConfig("semi-axes and exponents must be positive")
        if not 0 <= self.axial_extent < 1:
            raise InvalidConfig("axial_extent must lie in [0, 1)")
        if self.amplitude < 0:
            raise InvalidConfig("amplitude must be non-negative")
        if self.spacing_mm <= 0 or self.slice_thickness_mm <= 0:
            raise InvalidConfig("spacing and slice thickness must be positive")
        ocm = ParameterBounds.defaults(self.size, self.size)
        pb = self.perturbation_bounds()
        for name in ("s", "theta", "tx", "ty"):
            lb, ub = pb.get(name)
            olb, oub = ocm.get(name)
            if lb is None or ub is None or lb < olb - 1e-12 or ub > oub + 1e-12:
                raise InvalidConfig(f"perturbation bound for {name} must lie within {olb, oub}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = self.perturbation_bounds().to_dict()
        d["semi_axes_mm"] = list(self.semi_axes_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if kw.get("bounds") is not None:
            kw["bounds"] = ParameterBounds.from_dict(kw["bounds"])
        if "semi_axes_mm" in kw:
            kw["semi_axes_mm"] = tuple(kw["semi_axes_mm"])
        return cls(**kw)


@dataclass
class Phantom:
    truth: SliceStack
    perturbed: SliceStack
    gt_transforms: List[SimilarityTransform]
    gt_fields: List[DisplacementField]
    semi_axes_px: List[Tuple[float, float]] = field(default_factory=list)


def axial_profile(cfg: PhantomConfig) -> np.ndarray:
    """Cross-section scale factor of each slice along the stack axis."""
    if cfg.n_slices == 1:
        z = np.zeros(1)
    else:
        z = np.linspace(-cfg.axial_extent, cfg.axial_extent, cfg.n_slices)
    return (1.0 - np.abs(z) ** cfg.axial_exponent) ** (1.0 / cfg.axial_exponent)


def superellipse_mask(size: int, a: float, b: float, exponent: float, hilum_fraction: float = 0.0) -> np.ndarray:
    """Boolean superellipse centred on the canvas, optionally notched on the +x flank."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = (xx - c) / a
    y = (yy - c) / b
    inside = np.abs(x) ** exponent + np.abs(y) ** exponent <= 1.0
    if hilum_fraction > 0:
        r = hilum_fraction * b
        notch = (xx - (c + a)) ** 2 + (yy - c) ** 2 <= (1.6 * r) ** 2
        inside &= ~notch
    return inside


def superellipse_area(a: float, b: float, exponent: float) -> float:
    return 4.0 * a * b * gamma(1.0 + 1.0 / exponent) ** 2 / gamma(1.0 + 2.0 / exponent)


def superellipsoid_mask(shape, semi_axes, exponent: float, center=None) -> np.ndarray:
    """Boolean ``[z, y, x]`` grid of |x/a|^r + |y/b|^r + |z/c|^r <= 1 (voxel units)."""
    nz, ny, nx = shape
    a, b, c = semi_axes
    if center is None:
        center = ((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0)
    z = (np.arange(nz) - center[2]) / c
    y = (np.arange(ny) - center[1]) / b
    x = (np.arange(nx) - center[0]) / a
    r = exponent
    return (np.abs(z)[:, None, None] ** r + np.abs(y)[None, :, None] ** r
            + np.abs(x)[None, None, :] ** r) <= 1.0


def superellipsoid_volume(a: float, b: float, c: float, exponent: float) -> float:
    """Closed-form volume of |x/a|^r + |y/b|^r + |z/c|^r <= 1."""
    r = exponent
    return 8.0 * a * b * c * gamma(1.0 + 1.0 / r) ** 3 / gamma(1.0 + 3.0 / r)


def sample_smooth_field(size, amplitude: float, seed: int, control_points: int = 5) -> DisplacementField:
    """Band-limited random field: Gaussian control grid upsampled bicubically,
    rescaled so the largest displacement magnitude equals ``amplitude``."""
    if amplitude < 0:
        raise InvalidConfig("amplitude must be non-negative")
    h, w = (size, size) if np.isscalar(size) else size
    # below the float32 normal range the field cannot be stored within the bound
    if amplitude < np.finfo(np.float32).tiny:
        return DisplacementField.zeros(h, w)
    rng = np.random.default_rng(seed)
    k = max(4, int(control_points))
    gy = np.linspace(0, h - 1, k)
    gx = np.linspace(0, w - 1, k)
    comps = []
    for _ in range(2):
        ctrl = rng.standard_normal((k, k))
        spline = RectBivariateSpline(gy, gx, ctrl, kx=3, ky=3)
        comps.append(spline(np.arange(h), np.arange(w)))
    mag = np.sqrt(comps[0] ** 2 + comps[1] ** 2).max()
    if mag == 0:
        return DisplacementField.zeros(h, w)
    # float32 storage may round up; shrink by a hair so the bound holds exactly
    scale = amplitude / mag * (1.0 - 1e-6)
    return DisplacementField(comps[0] * scale, comps[1] * scale)


def sample_transform(rng: np.random.Generator, bounds: ParameterBounds) -> SimilarityTransform:
    vals = []
    for name in ("s", "theta", "tx", "ty"):
        lb, ub = bounds.get(name)
        vals.append(lb if lb == ub else rng.uniform(lb, ub))
    return SimilarityTransform(*vals)


def generate_phantom(cfg: PhantomConfig = PhantomConfig()) -> Phantom:
    """Build the truth stack and its perturbed counterpart.

    ``gt_transforms[i]`` is the correction that maps perturbed slice i back
    onto the truth, i.e. the perturbation applied was its inverse. Slice 0
    is the untouched anchor.
    """
    cfg.validate()
    bounds = cfg.perturbation_bounds()
    rng = np.random.default_rng(cfg.seed)
    spacing = (cfg.spacing_mm, cfg.spacing_mm)
    profile = axial_profile(cfg)
    a0 = cfg.semi_axes_mm[0] / cfg.spacing_mm
    b0 = cfg.semi_axes_mm[1] / cfg.spacing_mm

    truth, perturbed, gts, fields, axes = [], [], [], [], []
    for i, f in enumerate(profile):
        a, b = a0 * f, b0 * f
        m = Mask2D(superellipse_mask(cfg.size, a, b, cfg.exponent, cfg.hilum_fraction), spacing)
        truth.append(m)
        axes.append((a, b))
        if i == 0:
            T = SimilarityTransform.identity()
            phi = DisplacementField.zeros(cfg.size, cfg.size)
        else:
            T = sample_transform(rng, bounds)
            field_seed = int(rng.integers(0, 2**31 - 1))
            phi = sample_smooth_field(cfg.size, cfg.amplitude, field_seed, cfg.control_points)
        moved = warp_similarity(m, T.inverse())
        if cfg.amplitude > 0 and i > 0:
            moved = warp_dense(moved, phi)
        perturbed.append(moved)
        gts.append(T)
        fields.append(phi)

    return Phantom(
        SliceStack(tuple(truth), cfg.slice_thickness_mm, cfg.spacing_mm),
        SliceStack(tuple(perturbed), cfg.slice_thickness_mm, cfg.spacing_mm),
        gts,
        fields,
        axes,
    )
