"""Pixel-to-millimetre calibration from a metric grid in the background.

Edges are found with a Sobel magnitude and an Otsu threshold, grid lines
with a (rho, theta) Hough transform, and the scale is the grid pitch over
the median spacing between adjacent parallel lines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi

from .errors import EmptyInput, InsufficientGrid, NoPeaks
from .types import Image2D, Mask2D

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class HoughAccumulator:
    H: np.ndarray          # (n_rho, n_theta) vote counts
    rho_res: float
    theta_res: float
    rho_max: int           # bin i covers rho = (i - rho_max) * rho_res
    scatter: Optional[np.ndarray] = None    # rho scatter of each cell's voters, for tie-breaks

    @property
    def thetas(self) -> np.ndarray:
        return np.arange(self.H.shape[1]) * self.theta_res

    @property
    def rhos(self) -> np.ndarray:
        return (np.arange(self.H.shape[0]) - self.rho_max) * self.rho_res

    def cell(self, rho_bin: int, theta_bin: int) -> Tuple[float, float]:
        return (rho_bin - self.rho_max) * self.rho_res, theta_bin * self.theta_res

    def argmax(self) -> Tuple[int, int]:
        """Most-voted cell, ties resolved like :func:`hough_peaks`."""
        r, t = np.nonzero(self.H == self.H.max())
        res = self.scatter[r, t] if self.scatter is not None else np.zeros(r.size)
        k = np.lexsort((t, r, res))[0]
        return int(r[k]), int(t[k])


@dataclass(frozen=True)
class Peak:
    rho: float
    theta: float
    rho_bin: int
    theta_bin: int
    votes: int


@dataclass(frozen=True)
class DetectedLine:
    rho: float
    theta: float
    endpoints: Tuple[Tuple[int, int], Tuple[int, int]]   # (x, y) pixel pairs
    support: int = 0

    def to_dict(self) -> dict:
        return {"rho": self.rho, "theta": self.theta, "endpoints": [list(p) for p in self.endpoints],
                "support": self.support}


@dataclass(frozen=True)
class ScaleFactor:
    S: float   # mm per pixel

    def __post_init__(self):
        if not (self.S > 0 and math.isfinite(self.S)):
            raise ValueError(f"scale factor must be positive and finite, got {self.S}")


@dataclass
class CalibrationResult:
    scale: ScaleFactor
    lines: List[DetectedLine]
    diagnostics: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"S": self.scale.S, "lines": [ln.to_dict() for ln in self.lines],
                "diagnostics": list(self.diagnostics)}


# ----------------------------------------------------------------------
# edges
# ----------------------------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing the between-class variance of a histogram."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def detect_edges(img) -> Mask2D:
    """Sobel gradient magnitude thresholded with Otsu."""
    a = img.astype_float() if hasattr(img, "astype_float") else np.asarray(img, dtype=np.float64)
    gx = ndi.sobel(a, axis=1, mode="nearest")
    gy = ndi.sobel(a, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    spacing = getattr(img, "spacing", (1.0, 1.0))
    if mag.max() <= 0:
        return Mask2D(np.zeros(a.shape, dtype=bool), spacing)
    return Mask2D(mag > otsu_threshold(mag), spacing)


# ----------------------------------------------------------------------
# Hough transform
# ----------------------------------------------------------------------

def _edge_array(edges) -> np.ndarray:
    return np.asarray(edges.data if hasattr(edges, "data") else edges, dtype=bool)


def hough_accumulate(edges, rho_res: float = 1.0, theta_res: float = math.pi / 180) -> HoughAccumulator:
    """Vote every edge pixel into each theta bin at rho = x cos(theta) + y sin(theta)."""
    e = _edge_array(edges)
    if rho_res <= 0 or theta_res <= 0:
        raise ValueError("resolutions must be positive")
    ys, xs = np.nonzero(e)
    if xs.size == 0:
        raise EmptyInput("edge mask has no pixels")
    h, w = e.shape
    n_theta = int(round(math.pi / theta_res))
    thetas = np.arange(n_theta) * theta_res
    rho_max = int(math.ceil(math.hypot(w - 1, h - 1) / rho_res))
    n_rho = 2 * rho_max + 1
    H = np.zeros(n_rho * n_theta, dtype=np.int64)
    R1 = np.zeros(n_rho * n_theta, dtype=np.float64)
    R2 = np.zeros(n_rho * n_theta, dtype=np.float64)
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    cols = np.arange(n_theta)
    # chunk so memory stays bounded for large edge sets
    for start in range(0, xs.size, 4096):
        x = xs[start:start + 4096, None].astype(np.float64)
        y = ys[start:start + 4096, None].astype(np.float64)
        r = (x * cos_t + y * sin_t) / rho_res
        rr = np.rint(r)
        idx = ((rr.astype(np.int64) + rho_max) * n_theta + cols).ravel()
        H += np.bincount(idx, minlength=n_rho * n_theta)
        # offsets from the bin centre keep the sums small and well conditioned
        dr = (r - rr).ravel()
        R1 += np.bincount(idx, weights=dr, minlength=n_rho * n_theta)
        R2 += np.bincount(idx, weights=dr * dr, minlength=n_rho * n_theta)
    # sum of squared deviations from the cell mean; zero for exactly collinear voters
    scatter = R2 - R1 * R1 / np.maximum(H, 1)
    return HoughAccumulator(H.reshape(n_rho, n_theta), rho_res, theta_res, rho_max,
                            np.round(np.maximum(scatter, 0.0).reshape(n_rho, n_theta), 9))


def hough_peaks(acc: HoughAccumulator, N: int = 40, tau: float = 0.3, neighborhood: int = 5) -> List[Peak]:
    """Greedy non-maximum suppression on the accumulator.

    Cells at or above ``tau * max`` are visited by descending count. Equal
    counts go first to the cell whose voters scatter least in rho (collinear
    pixels agree exactly at the line's true angle), then by (rho bin, theta
    bin) ascending. Each accepted cell blanks a ``neighborhood`` x
    ``neighborhood`` window around itself, wrapping across theta = pi.
    """
    if N < 1 or not 0 < tau <= 1:
        raise ValueError("need N >= 1 and 0 < tau <= 1")
    H = acc.H
    top = int(H.max())
    if top <= 0:
        raise NoPeaks("accumulator is all zero")
    r, t = np.nonzero(H >= tau * top)
    v = H[r, t]
    res = acc.scatter[r, t] if acc.scatter is not None else np.zeros(r.size)
    order = np.lexsort((t, r, res, -v))
    half = neighborhood // 2
    blocked = np.zeros(H.shape, dtype=bool)
    peaks: List[Peak] = []
    for k in order:
        i, j = int(r[k]), int(t[k])
        if blocked[i, j]:
            continue
        rho, theta = acc.cell(i, j)
        peaks.append(Peak(rho, theta, i, j, int(v[k])))
        if len(peaks) == N:
            break
        _suppress(blocked, i, j, half)
    return peaks


def _suppress(blocked: np.ndarray, i: int, j: int, half: int) -> None:
    # theta wraps at pi where (rho, theta) and (-rho, theta - pi) are the same line
    n_rho, n_theta = blocked.shape
    for jj in range(j - half, j + half + 1):
        rows = np.arange(i - half, i + half + 1)
        if jj < 0 or jj >= n_theta:
            jj %= n_theta
            rows = n_rho - 1 - rows
        rows = rows[(rows >= 0) & (rows < n_rho)]
        blocked[rows, jj] = True


def extract_lines(edges, peaks: Sequence[Peak], rho_tol: Optional[float] = None,
                  diagnostics: Optional[list] = None, rho_res: float = 1.0) -> List[DetectedLine]:
    """Segments supported by each peak.

    Edge pixels within ``rho_tol`` (default two rho bins, the suppression
    half-width) of the peak support it. The line's rho is refined to their
    mean offset, which centres it between the two edges a drawn grid line
    produces; the endpoints are the extreme supporting pixels along the line.
    """
    e = _edge_array(edges)
    tol = 2.0 * rho_res if rho_tol is None else rho_tol
    ys, xs = np.nonzero(e)
    lines = []
    for p in peaks:
        c, s = math.cos(p.theta), math.sin(p.theta)
        near = np.abs(xs * c + ys * s - p.rho) <= tol
        if not near.any():
            msg = f"peak (rho={p.rho:.1f}, theta={math.degrees(p.theta):.1f} deg) has no support"
            logger.info(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        px, py = xs[near], ys[near]
        along = -px * s + py * c
        a, b = int(np.argmin(along)), int(np.argmax(along))
        ends = ((int(px[a]), int(py[a])), (int(px[b]), int(py[b])))
        rho = float(np.mean(px * c + py * s))
        lines.append(DetectedLine(rho, float(p.theta), ends, int(near.sum())))
    return lines


# ----------------------------------------------------------------------
# scale
# ----------------------------------------------------------------------

def _canonical(line: DetectedLine) -> Tuple[float, float]:
    # fold theta near pi onto negative angles so near-vertical lines group together
    if line.theta > math.pi / 2 + math.pi / 4:
        return line.theta - math.pi, -line.rho
    return line.theta, line.rho


def dominant_family(lines: Sequence[DetectedLine], theta_tol: float = math.radians(2.0)) -> List[Tuple[float, float, int]]:
    """(theta, rho, support) of the largest group of mutually parallel lines."""
    canon = [_canonical(ln) + (ln.support,) for ln in lines]
    best: List[Tuple[float, float, int]] = []
    for th0, _, _ in sorted(canon):
        group = [c for c in canon if abs(c[0] - th0) <= theta_tol]
        if len(group) > len(best):
            best = group
    return best


def grid_scale(lines: Sequence[DetectedLine], grid_pitch_mm: float,
               theta_tol: float = math.radians(2.0), merge_tol: float = 3.0) -> ScaleFactor:
    """S = pitch / median spacing of adjacent lines in the dominant parallel family.

    Lines closer than ``merge_tol`` pixels are duplicates of one grid line
    (slightly tilted Hough neighbours); only the best-supported one is kept.
    """
    if not grid_pitch_mm > 0:
        raise ValueError("grid pitch must be positive")
    fam = dominant_family(lines, theta_tol)
    if len(fam) < 2:
        raise InsufficientGrid(f"need at least 2 parallel lines, found {len(fam)}")
    fam = sorted(fam, key=lambda c: c[1])
    clusters = [[fam[0]]]
    for c in fam[1:]:
        if c[1] - clusters[-1][-1][1] < merge_tol:
            clusters[-1].append(c)
        else:
            clusters.append([c])
    # support ties keep the earliest (smallest rho) line
    centers = [max(g, key=lambda c: c[2])[1] for g in clusters]
    if len(centers) < 2:
        raise InsufficientGrid("all parallel lines collapse onto one grid line")
    spacing = float(np.median(np.diff(centers)))
    return ScaleFactor(grid_pitch_mm / spacing)


def calibrate_image(img, grid_pitch_mm: float, rho_res: float = 1.0, theta_res: float = math.pi / 180,
                    N: int = 40, tau: float = 0.3) -> CalibrationResult:
    diagnostics: List[str] = []
    edges = detect_edges(img)
    acc = hough_accumulate(edges, rho_res, theta_res)
    peaks = hough_peaks(acc, N, tau)
    lines = extract_lines(edges, peaks, diagnostics=diagnostics, rho_res=rho_res)
    S = grid_scale(lines, grid_pitch_mm)
    return CalibrationResult(S, lines, diagnostics)


def calibrate_stack(images: Sequence, grid_pitch_mm: float, **kw):
    """Per-image scale and the median over images used as the stack's global S.

    Returns ``(S, per_image, deviations)`` with relative deviations of each
    image's scale from the global value.
    """
    if not images:
        raise EmptyInput("no calibration images")
    per = [calibrate_image(im, grid_pitch_mm, **kw) for im in images]
    values = np.array([r.scale.S for r in per])
    S = ScaleFactor(float(np.median(values)))
    dev = ((values - S.S) / S.S).tolist()
    if np.max(np.abs(dev)) > 0.02:
        logger.warning("per-image scales deviate by up to %.1f%% from the median", 100 * np.max(np.abs(dev)))
    return S, per, dev


def synthetic_grid(size: int = 256, spacing: float = 50.0, offset: float = 10.0, noise: float = 0.02,
                   seed: int = 0, thickness: float = 1.0, angle: float = 0.0) -> Image2D:
    """Dark grid lines on a bright background with additive Gaussian noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    u = xx * c + yy * s - offset
    v = -xx * s + yy * c - offset
    du = np.abs((u + spacing / 2) % spacing - spacing / 2)
    dv = np.abs((v + spacing / 2) % spacing - spacing / 2)
    on = (du < thickness / 2 + 1e-9) | (dv < thickness / 2 + 1e-9)
    img = np.where(on, 0.2, 0.9) + noise * rng.standard_normal((size, size))
    return Image2D(np.clip(img, 0.0, 1.0))
