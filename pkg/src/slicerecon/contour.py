"""Slice contours: boundary tracing, Bezier smoothing and rasterization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi

from .errors import DomainError, EmptyMask
from .types import Mask2D

logger = logging.getLogger(__name__)

# clockwise on screen (y down), starting east
_DIRS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
_WEST = 4


@dataclass(frozen=True, eq=False)
class BezierSegment:
    control: np.ndarray  # (n + 1, 2)

    def __post_init__(self):
        ctrl = np.asarray(self.control, dtype=np.float64)
        if ctrl.ndim != 2 or ctrl.shape[0] < 2:
            raise ValueError("a Bezier segment needs at least two control points")
        object.__setattr__(self, "control", ctrl)

    @property
    def degree(self) -> int:
        return self.control.shape[0] - 1


@dataclass(frozen=True, eq=False)
class Contour:
    points: np.ndarray  # (N, 2) as (x, y)
    closed: bool = True
    flags: Tuple[str, ...] = ()
    segments: Tuple[BezierSegment, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "flags", tuple(self.flags))

    def __len__(self):
        return self.points.shape[0]

    def area(self) -> float:
        """Shoelace area of the closed polygon."""
        if len(self) < 3:
            return 0.0
        x, y = self.points[:, 0], self.points[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "closed": self.closed,
            "flags": list(self.flags),
            "segments": [s.control.tolist() for s in self.segments],
        }


# ----------------------------------------------------------------------
# boundary tracing
# ----------------------------------------------------------------------

def _largest_component(mask: np.ndarray):
    labels, n = ndi.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n <= 1:
        return mask, n
    sizes = ndi.sum_labels(mask, labels, index=np.arange(1, n + 1))
    keep = int(np.argmax(sizes)) + 1
    return labels == keep, n


def extract_contour(m: Mask2D) -> Contour:
    """Outer boundary of the (largest 8-connected) foreground component.

    Moore-neighbour tracing, clockwise on screen, starting at the topmost,
    then leftmost, foreground pixel. Points are pixel centers.
    """
    data = np.asarray(m.data, dtype=bool)
    if not data.any():
        raise EmptyMask("cannot extract a contour from an empty mask")
    flags = []
    data, ncomp = _largest_component(data)
    if ncomp > 1:
        flags.append("multiple_components")
        logger.warning("mask has %d components; tracing the largest", ncomp)

    h, w = data.shape

    def fg(x, y):
        return 0 <= x < w and 0 <= y < h and data[y, x]

    ys, xs = np.nonzero(data)
    top = ys.min()
    start = (int(xs[ys == top].min()), int(top))

    def step(cur, back):
        for k in range(1, 9):
            d = (back + k) % 8
            nx, ny = cur[0] + _DIRS[d][0], cur[1] + _DIRS[d][1]
            if fg(nx, ny):
                # the last background cell examined becomes the new backtrack
                px, py = cur[0] + _DIRS[(d - 1) % 8][0], cur[1] + _DIRS[(d - 1) % 8][1]
                nb = _DIRS.index((px - nx, py - ny))
                return (nx, ny), nb
        return None, back

    first, back = step(start, _WEST)
    if first is None:
        return Contour(np.array([start], dtype=float), True, flags + ["degenerate"])

    points = [start]
    cur = first
    limit = 4 * data.size + 8
    while len(points) < limit:
        nxt, back = step(cur, back)
        if cur == start and nxt == first:
            break
        points.append(cur)
        cur = nxt
    return Contour(np.array(points, dtype=float), True, flags)


# ----------------------------------------------------------------------
# Bezier curves
# ----------------------------------------------------------------------

def bernstein(i: int, n: int, t):
    """C(n, i) t^i (1 - t)^(n - i)."""
    if not 0 <= i <= n:
        raise DomainError(f"Bernstein index {i} outside 0..{n}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise DomainError("t must lie in [0, 1]")
    out = math.comb(n, i) * t_arr ** i * (1.0 - t_arr) ** (n - i)
    return float(out) if out.ndim == 0 else out


def bezier_eval(seg: BezierSegment, t):
    """Point(s) on the curve; x and y are evaluated independently."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise DomainError("t must lie in [0, 1]")
    n = seg.degree
    basis = np.stack([np.asarray(bernstein(i, n, t_arr)) for i in range(n + 1)], axis=-1)
    return basis @ seg.control


def _chord_params(pts: np.ndarray) -> np.ndarray:
    d = np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1))
    s = np.concatenate([[0.0], np.cumsum(d)])
    if s[-1] == 0:
        return np.linspace(0.0, 1.0, len(pts))
    return s / s[-1]


def fit_cubic(pts: np.ndarray) -> BezierSegment:
    """Least-squares cubic through ``pts`` with both endpoints pinned.

    The inner control points start at the chord thirds; the least-squares
    correction is the minimum-norm one, so runs with fewer than four points
    still give a well-defined (straight or near-straight) segment.
    """
    p0, p3 = pts[0], pts[-1]
    c1 = p0 + (p3 - p0) / 3.0
    c2 = p0 + 2.0 * (p3 - p0) / 3.0
    t = _chord_params(pts)
    b0, b1, b2, b3 = ((1 - t) ** 3, 3 * t * (1 - t) ** 2, 3 * t ** 2 * (1 - t), t ** 3)
    A = np.stack([b1, b2], axis=1)
    rhs = pts - np.outer(b0, p0) - np.outer(b3, p3) - np.outer(b1, c1) - np.outer(b2, c2)
    delta, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return BezierSegment(np.stack([p0, c1 + delta[0], c2 + delta[1], p3]))


def smooth_contour(c: Contour, segment_len: int = 8, samples_per_segment: int = 16) -> Contour:
    """Replace a closed contour by a C0 chain of least-squares cubic Beziers.

    Consecutive runs of ``segment_len`` points share their end points; each
    segment is sampled at ``samples_per_segment`` uniform t in [0, 1).
    """
    pts = c.points
    n = len(pts)
    if n < 4 or not c.closed:
        return Contour(pts, c.closed, tuple(c.flags) + ("too_few_points",))
    if segment_len < 2 or samples_per_segment < 1:
        raise ValueError("segment_len must be >= 2 and samples_per_segment >= 1")

    ring = np.vstack([pts, pts[:1]])
    step = segment_len - 1
    if step >= n:
        runs = [ring]
    else:
        runs = [ring[s:min(s + step, n) + 1] for s in range(0, n, step)]

    segments = [fit_cubic(r) for r in runs]
    t = np.arange(samples_per_segment) / samples_per_segment
    out = np.vstack([bezier_eval(seg, t) for seg in segments])
    return Contour(out, True, c.flags, tuple(segments))


# ----------------------------------------------------------------------
# rasterization
# ----------------------------------------------------------------------

def _self_intersects(pts: np.ndarray) -> bool:
    n = len(pts)
    if n < 4:
        return False
    a = pts
    b = np.roll(pts, -1, axis=0)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    for i in range(n):
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]
        if j.size == 0:
            continue
        o1 = orient(a[i], b[i], a[j])
        o2 = orient(a[i], b[i], b[j])
        o3 = orient(a[j], b[j], a[i][None, :])
        o4 = orient(a[j], b[j], b[i][None, :])
        if np.any((o1 * o2 < 0) & (o3 * o4 < 0)):
            return True
    return False


def _near_outline(pts: np.ndarray, shape, radius: float) -> np.ndarray:
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    a = pts
    b = np.roll(pts, -1, axis=0)
    for p, q in zip(a, b):
        x0 = max(int(math.floor(min(p[0], q[0]) - radius)), 0)
        x1 = min(int(math.ceil(max(p[0], q[0]) + radius)), w - 1)
        y0 = max(int(math.floor(min(p[1], q[1]) - radius)), 0)
        y1 = min(int(math.ceil(max(p[1], q[1]) + radius)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        d = q - p
        L2 = float(d @ d)
        if L2 == 0:
            t = np.zeros_like(xx)
        else:
            t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / L2, 0.0, 1.0)
        dist2 = (xx - p[0] - t * d[0]) ** 2 + (yy - p[1] - t * d[1]) ** 2
        out[y0:y1 + 1, x0:x1 + 1] |= dist2 <= radius * radius + 1e-12
    return out


def rasterize_contour(c: Contour, dims, spacing=(1.0, 1.0), diagnostics: Optional[list] = None) -> Mask2D:
    """Fill a closed contour with the even-odd rule, sampling pixel centers.

    Pixels whose centers lie within half a pixel of the outline are also
    set, so tracing a mask and filling its contour gives the mask back.
    """
    h, w = dims
    pts = c.points
    diag = diagnostics if diagnostics is not None else []
    if len(pts) < 3:
        diag.append("degenerate_contour")
        logger.warning("contour with %d points rasterizes to an empty mask", len(pts))
        return Mask2D(np.zeros((h, w), dtype=bool), spacing)
    if _self_intersects(pts):
        diag.append("self_intersecting")
        logger.warning("self-intersecting contour filled with the even-odd rule")

    out = np.zeros((h, w), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ymin = max(int(math.ceil(pts[:, 1].min())), 0)
    ymax = min(int(math.floor(pts[:, 1].max())), h - 1)
    for y in range(ymin, ymax + 1):
        crosses = ((y0 <= y) & (y < y1)) | ((y1 <= y) & (y < y0))
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(xa + (y - ya) * (xb - xa) / (yb - ya))
        for left, right in zip(xs[0::2], xs[1::2]):
            lo = max(int(math.ceil(left - 1e-9)), 0)
            hi = min(int(math.floor(right + 1e-9)), w - 1)
            if lo <= hi:
                out[y, lo:hi + 1] = True
    out |= _near_outline(pts, (h, w), 0.5)
    return Mask2D(out, spacing)
