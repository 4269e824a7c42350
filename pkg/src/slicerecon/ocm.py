"""Global slice alignment by bounded similarity registration.

Each slice is registered to its already aligned predecessor by minimizing
the sum of squared differences over a bounded similarity transform. Bounds
are enforced by re-parameterizing every bounded variable into an
unconstrained one and running a Nelder-Mead simplex there.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi

from . import _kernels
from .errors import InsufficientSlices, OutOfBounds, ShapeError, SliceError
from .simplex import nelder_mead
from .types import (
    PARAM_NAMES,
    Image2D,
    Mask2D,
    ParameterBounds,
    Raster,
    SimilarityTransform,
    SliceStack,
    image_center,
)

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------

def pullback(T: SimilarityTransform, shape) -> Tuple[np.ndarray, np.ndarray]:
    """Return (A, b) such that output pixel p' samples the input at A p' + b."""
    cx, cy = image_center(shape)
    c = np.array([cx, cy])
    A = np.linalg.inv(T.forward_matrix())
    b = c - A @ (c + np.array([T.tx, T.ty]))
    return A, b


def warp_similarity(img: Raster, T: SimilarityTransform) -> Raster:
    """Resample ``img`` under ``T`` about the image center.

    Images use bilinear interpolation, masks nearest neighbour; samples
    falling off the canvas are background.
    """
    if not isinstance(T, SimilarityTransform):
        raise TypeError("expected a SimilarityTransform")
    if T.is_identity():
        return type(img)(img.data, img.spacing)
    A, b = pullback(T, img.shape)
    args = (A[0, 0], A[0, 1], A[1, 0], A[1, 1], b[0], b[1])
    if isinstance(img, Mask2D):
        out = _kernels.affine_nearest(np.ascontiguousarray(img.data), *args)
        return Mask2D(out, img.spacing)
    out = _kernels.affine_bilinear(img.astype_float(), *args)
    return Image2D(np.clip(out, 0.0, 1.0), img.spacing)


def _as_float(img) -> np.ndarray:
    if isinstance(img, (Image2D, Mask2D)):
        return np.ascontiguousarray(img.astype_float())
    return np.ascontiguousarray(np.asarray(img, dtype=np.float64))


def _ssd(prev: np.ndarray, cur: np.ndarray, T: SimilarityTransform, region=None) -> float:
    A, b = pullback(T, cur.shape)
    h, w = prev.shape
    y0, y1, x0, x1 = region if region is not None else (0, h, 0, w)
    return _kernels.affine_ssd(prev, cur, A[0, 0], A[0, 1], A[1, 0], A[1, 1], b[0], b[1], y0, y1, x0, x1)


def ssd_objective(prev: Raster, cur: Raster, T: SimilarityTransform, region=None) -> float:
    """Sum over pixels of (prev - T(cur))^2, cur resampled bilinearly.

    ``region`` optionally restricts the sum to rows/cols ``(y0, y1, x0, x1)``.
    """
    if prev.shape != cur.shape:
        raise ShapeError(f"image shapes differ: {prev.shape} vs {cur.shape}")
    return float(_ssd(_as_float(prev), _as_float(cur), T, region))


# ----------------------------------------------------------------------
# bound transforms
# ----------------------------------------------------------------------

def bound_to_unbounded(x: float, lb: Optional[float] = None, ub: Optional[float] = None) -> float:
    """Map a bounded variable to the unconstrained optimization space."""
    if lb is not None and x < lb or ub is not None and x > ub:
        raise OutOfBounds(f"{x} outside [{lb}, {ub}]")
    if lb is not None and ub is not None:
        if ub == lb:
            return 0.0
        z = 2.0 * (x - lb) / (ub - lb) - 1.0
        return math.asin(min(1.0, max(-1.0, z)))
    if lb is not None:
        return math.sqrt(x - lb)
    if ub is not None:
        return math.sqrt(ub - x)
    return x


def unbounded_to_bound(xt: float, lb: Optional[float] = None, ub: Optional[float] = None) -> float:
    """Inverse of :func:`bound_to_unbounded`; every real ``xt`` lands inside the bounds."""
    if lb is not None and ub is not None:
        x = lb + (ub - lb) * (math.sin(xt) + 1.0) / 2.0
        return min(ub, max(lb, x))
    if lb is not None:
        return lb + xt * xt
    if ub is not None:
        return ub - xt * xt
    return xt


# ----------------------------------------------------------------------
# optimization
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class OcmOptions:
    ftol: float = 1e-6
    maxfev: int = 2000
    step_s: float = 0.05
    step_theta_deg: float = 5.0
    step_t_frac: float = 0.05
    restarts: int = 5
    restrict_to_foreground: bool = False
    presmooth_sigma: float = 0.0
    reference_index: int = 0
    mask_hook: Optional[str] = None  # "erode" | "dilate"
    mask_hook_radius: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "OcmOptions":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PairResult:
    transform: SimilarityTransform
    objective: float
    converged: bool
    nfev: int
    initial_objective: float


@dataclass
class OcmResult:
    transforms: List[SimilarityTransform]
    objective_trace: List[float]
    converged: List[bool]
    aligned: SliceStack

    def to_records(self) -> list:
        out = []
        for T, f, ok in zip(self.transforms, self.objective_trace, self.converged):
            d = T.to_dict()
            d.update(objective=f, converged=ok)
            out.append(d)
        return out


# optimizer works in degrees for theta; everything else in transform units
def _opt_bounds(bounds: ParameterBounds):
    out = []
    for name in PARAM_NAMES:
        lb, ub = bounds.get(name)
        if name == "theta":
            lb = None if lb is None else math.degrees(lb)
            ub = None if ub is None else math.degrees(ub)
        out.append((lb, ub))
    return out


def _to_transform(vals) -> SimilarityTransform:
    s, theta_deg, tx, ty = vals
    return SimilarityTransform(s, math.radians(theta_deg), tx, ty)


def _clip(x, lb, ub):
    if lb is not None:
        x = max(lb, x)
    if ub is not None:
        x = min(ub, x)
    return x


def _start_points(shape) -> List[Tuple[float, float, float, float]]:
    # identity plus four deterministic perturbations
    return [
        (1.0, 0.0, 0.0, 0.0),
        (1.0, 22.5, 0.0, 0.0),
        (1.0, -22.5, 0.0, 0.0),
        (0.9, 0.0, 0.0, 0.0),
        (1.1, 0.0, 0.0, 0.0),
    ]


def _foreground_box(a: np.ndarray, b: np.ndarray):
    fg = (a > 0) | (b > 0)
    if not fg.any():
        return None
    ys, xs = np.nonzero(fg)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def _optimize_from(prev, cur, obounds, start, opts, region, h, w) -> PairResult:
    free = [i for i, (lb, ub) in enumerate(obounds) if not (lb is not None and lb == ub)]
    base = [lb if (lb is not None and lb == ub) else _clip(v, lb, ub)
            for v, (lb, ub) in zip(start, obounds)]
    nominal_steps = (opts.step_s, opts.step_theta_deg, opts.step_t_frac * w, opts.step_t_frac * h)

    z0, steps = [], []
    for i in free:
        lb, ub = obounds[i]
        x0 = base[i]
        zt = bound_to_unbounded(x0, lb, ub)
        dx = nominal_steps[i]
        up = x0 + dx
        if ub is not None and up > ub:
            up = x0 - dx
            if lb is not None and up < lb:
                up = lb
        z0.append(zt)
        step = bound_to_unbounded(up, lb, ub) - zt
        steps.append(step if step != 0 else 0.1)

    def params(z):
        vals = list(base)
        for k, i in enumerate(free):
            lb, ub = obounds[i]
            vals[i] = unbounded_to_bound(float(z[k]), lb, ub)
        return vals

    def f(z):
        return _ssd(prev, cur, _to_transform(params(z)), region)

    f_start = f(np.array(z0))
    res = nelder_mead(f, z0, steps, ftol=opts.ftol, maxfev=opts.maxfev)
    T = _to_transform(params(res.x))
    return PairResult(T, float(res.fun), res.converged, res.nfev, f_start)


def optimize_pair(prev: Raster, cur: Raster, bounds: Optional[ParameterBounds] = None,
                  opts: OcmOptions = OcmOptions()) -> PairResult:
    """Find the bounded similarity transform that best maps ``cur`` onto ``prev``.

    Runs the simplex from the identity and from deterministic perturbed
    starts; the lowest objective wins, ties going to the smaller
    translation. The returned objective is never above the objective at the
    identity guess (or at the bound-clipped identity when the identity is
    infeasible).
    """
    if prev.shape != cur.shape:
        raise ShapeError(f"image shapes differ: {prev.shape} vs {cur.shape}")
    h, w = prev.shape
    bounds = bounds or ParameterBounds.defaults(w, h)
    a, b = _as_float(prev), _as_float(cur)
    if opts.presmooth_sigma > 0:
        a = ndi.gaussian_filter(a, opts.presmooth_sigma, mode="constant")
        b = ndi.gaussian_filter(b, opts.presmooth_sigma, mode="constant")
    region = _foreground_box(a, b) if opts.restrict_to_foreground else None
    obounds = _opt_bounds(bounds)

    starts = _start_points(prev.shape)[: max(1, opts.restarts)]
    if opts.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            results = list(pool.map(lambda s: _optimize_from(a, b, obounds, s, opts, region, h, w), starts))
    else:
        results = [_optimize_from(a, b, obounds, s, opts, region, h, w) for s in starts]

    best = min(results, key=lambda r: (r.objective, math.hypot(r.transform.tx, r.transform.ty)))
    nfev = sum(r.nfev for r in results)
    # smoothing/region restriction only shape the search; report the plain objective
    f_best = ssd_objective(prev, cur, best.transform)
    guess = _to_transform([_clip(v, lb, ub) for v, (lb, ub) in zip((1.0, 0.0, 0.0, 0.0), obounds)])
    f_guess = ssd_objective(prev, cur, guess)
    if f_guess < f_best:
        return PairResult(guess, f_guess, best.converged, nfev, f_guess)
    return PairResult(best.transform, f_best, best.converged, nfev, f_guess)


def local_mask_scaling(m: Mask2D, radius: int, mode: str = "dilate") -> Mask2D:
    """Binary erosion or dilation with a disk of the given radius (0 is a no-op)."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return Mask2D(m.data, m.spacing)
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = xx * xx + yy * yy <= r * r
    if mode == "erode":
        out = ndi.binary_erosion(m.data, structure=disk, border_value=0)
    elif mode == "dilate":
        out = ndi.binary_dilation(m.data, structure=disk)
    else:
        raise ValueError(f"mode must be 'erode' or 'dilate', got {mode!r}")
    return Mask2D(out, m.spacing)


def register_stack(stack: SliceStack, bounds: Optional[ParameterBounds] = None,
                   opts: OcmOptions = OcmOptions()) -> OcmResult:
    """Chain-register every slice to its aligned neighbour, starting from the
    reference slice (left untransformed) and walking outwards."""
    n = len(stack)
    if n < 2:
        raise InsufficientSlices(f"need at least 2 slices, got {n}")
    ref = opts.reference_index
    if not 0 <= ref < n:
        raise ValueError(f"reference_index {ref} outside stack of {n}")
    h, w = stack.shape
    bounds = bounds or ParameterBounds.defaults(w, h)

    transforms: List[Optional[SimilarityTransform]] = [None] * n
    objectives = [0.0] * n
    converged = [True] * n
    aligned: List[Optional[Raster]] = [None] * n
    transforms[ref] = SimilarityTransform.identity()
    aligned[ref] = stack[ref]

    order = [(i, i - 1) for i in range(ref + 1, n)] + [(i, i + 1) for i in range(ref - 1, -1, -1)]
    for i, j in order:
        try:
            res = optimize_pair(aligned[j], stack[i], bounds, opts)
        except Exception as exc:  # noqa: BLE001 - re-raised with the slice index
            raise SliceError(i, exc) from exc
        transforms[i] = res.transform
        objectives[i] = res.objective
        converged[i] = res.converged
        out = warp_similarity(stack[i], res.transform)
        if opts.mask_hook and isinstance(out, Mask2D):
            out = local_mask_scaling(out, opts.mask_hook_radius, opts.mask_hook)
        aligned[i] = out
        logger.debug("slice %d: %s f=%.4g converged=%s", i, res.transform, res.objective, res.converged)

    return OcmResult(transforms, objectives, converged, stack.replace(aligned))
