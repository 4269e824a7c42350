"""Evaluation metrics: overlap, boundary distance, intensity similarity,
dimension differences and the paired signed-rank test."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage as ndi
from scipy.stats import norm

from .errors import DomainError, EmptyMask, ShapeError, UndefinedCorrelation
from .types import Image2D, Mask2D, SliceStack, Volume3D

logger = logging.getLogger(__name__)


def _mask_and_spacing(m):
    """Boolean array plus spacing in array-axis order."""
    if isinstance(m, Volume3D):
        px, py, d = m.spacing
        return np.asarray(m.data, dtype=bool), (d, py, px)
    if isinstance(m, Mask2D):
        px, py = m.spacing
        return np.asarray(m.data, dtype=bool), (py, px)
    arr = np.asarray(m, dtype=bool)
    return arr, (1.0,) * arr.ndim


def _pair(a, b):
    A, sa = _mask_and_spacing(a)
    B, _ = _mask_and_spacing(b)
    if A.shape != B.shape:
        raise ShapeError(f"shapes differ: {A.shape} vs {B.shape}")
    return A, B, sa


# ----------------------------------------------------------------------
# overlap
# ----------------------------------------------------------------------

def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks count as a perfect match."""
    A, B, _ = _pair(a, b)
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        logger.info("dice of two empty masks defined as 1.0")
        return 1.0
    d = 2.0 * int(np.logical_and(A, B).sum()) / total
    assert 0.0 <= d <= 1.0
    return d


def iou(a, b) -> float:
    A, B, _ = _pair(a, b)
    union = int(np.logical_or(A, B).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(A, B).sum()) / union


def iou_from_dice(d: float) -> float:
    if not 0.0 <= d <= 1.0:
        raise DomainError(f"dice must lie in [0, 1], got {d}")
    return d / (2.0 - d)


# ----------------------------------------------------------------------
# boundary distance
# ----------------------------------------------------------------------

def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels face-adjacent to background (the canvas edge counts as background)."""
    struct = ndi.generate_binary_structure(mask.ndim, 1)
    inner = ndi.binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~inner


def directed_distances(a: np.ndarray, b: np.ndarray, sampling) -> np.ndarray:
    """Distance from every boundary element of ``a`` to the nearest one of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dist = ndi.distance_transform_edt(~bb, sampling=sampling)
    return dist[ba]


def hd95(a, b) -> float:
    """95th percentile of the pooled boundary-to-boundary distances, in mm."""
    A, B, sampling = _pair(a, b)
    if not A.any() or not B.any():
        raise EmptyMask("hd95 needs two nonempty masks")
    pooled = np.concatenate([directed_distances(A, B, sampling), directed_distances(B, A, sampling)])
    h = float(np.percentile(pooled, 95))
    assert h >= 0.0
    return h


# ----------------------------------------------------------------------
# intensity similarity
# ----------------------------------------------------------------------

def _img(x) -> np.ndarray:
    return x.astype_float() if hasattr(x, "astype_float") else np.asarray(x, dtype=np.float64)


def ncc_global(a, b, region=None) -> float:
    """Zero-mean NCC over ``region`` (default: pixels nonzero in either image)."""
    A, B = _img(a), _img(b)
    if A.shape != B.shape:
        raise ShapeError(f"shapes differ: {A.shape} vs {B.shape}")
    if region is None:
        region = (A > 0) | (B > 0)
        if not region.any():
            region = np.ones(A.shape, dtype=bool)
    else:
        region = np.asarray(getattr(region, "data", region), dtype=bool)
    x = A[region] - A[region].mean()
    y = B[region] - B[region].mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    if den <= 1e-12:
        raise UndefinedCorrelation("an image is constant over the evaluation region")
    return float(np.clip((x @ y) / den, -1.0, 1.0))


def ssim(a, b, window: int = 8, C1: float = 0.01 ** 2, C2: float = 0.03 ** 2) -> float:
    """Mean SSIM over every fully-inside ``window`` x ``window`` block."""
    A, B = _img(a), _img(b)
    if A.shape != B.shape:
        raise ShapeError(f"shapes differ: {A.shape} vs {B.shape}")
    if min(A.shape) < window:
        raise ShapeError(f"images smaller than the {window}x{window} window")
    wa = sliding_window_view(A, (window, window))
    wb = sliding_window_view(B, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    va = wa.var(axis=(-1, -2))
    vb = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a ** 2 + mu_b ** 2 + C1) * (va + vb + C2))
    out = float(s.mean())
    assert -1.0 - 1e-9 <= out <= 1.0 + 1e-9
    return out


# ----------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------

def dc(q_macro: float, q_ct: float) -> float:
    """Difference coefficient 1 - q_macro / q_ct (signed)."""
    if not q_ct > 0:
        raise DomainError(f"reference quantity must be positive, got {q_ct}")
    return 1.0 - q_macro / q_ct


# ----------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float        # W+, the sum of ranks of positive differences
    p_value: float          # two-sided
    n: int                  # differences left after dropping zeros
    method: str             # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "n": self.n, "method": self.method}


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average (mid) ranks, 1-based."""
    order = np.argsort(values, kind="stable")
    sorted_v = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_upper_tail(doubled: Tuple[int, ...], w2: int) -> Tuple[float, float]:
    """P(W+ <= w) and P(W+ >= w) under random signs, on doubled (integer) ranks."""
    total = sum(doubled)
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    probs = counts / counts.sum()
    return float(probs[:w2 + 1].sum()), float(probs[w2:].sum())


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float], exact_max_n: int = 25,
                         min_n: int = 5) -> WilcoxonResult:
    """Paired two-sided signed-rank test on x - y.

    Zero differences are dropped. Up to ``exact_max_n`` pairs the p-value
    comes from the exact null distribution of W+ (every sign assignment
    equally likely); above that, a normal approximation with tie and
    continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("x and y must be 1D sequences of equal length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        logger.warning("all paired differences are zero; test is degenerate")
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    if n < min_n:
        raise DomainError(f"need at least {min_n} nonzero differences, got {n}")
    ranks = _ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = tuple(int(round(2 * r)) for r in ranks)
        lo, hi = _exact_upper_tail(doubled, int(round(2 * w_plus)))
        p = min(1.0, 2.0 * min(lo, hi))
        return WilcoxonResult(w_plus, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * float(norm.sf(max(z, 0.0))))
    return WilcoxonResult(w_plus, p, n, "normal")


def kfold_split(ids: Sequence, k: int = 5, seed: int = 0) -> List[Tuple[list, list]]:
    """Patient-level folds: a seeded shuffle cut into k near-equal test folds."""
    ids = list(ids)
    if k < 2:
        raise DomainError("k must be at least 2")
    if k > len(ids):
        raise DomainError(f"k={k} exceeds the {len(ids)} available ids")
    if len(set(ids)) != len(ids):
        raise DomainError("ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(perm, k)
    out = []
    for f in folds:
        test_idx = set(int(i) for i in f)
        test = [ids[i] for i in sorted(test_idx)]
        train = [ids[i] for i in range(len(ids)) if i not in test_idx]
        out.append((train, test))
    return out


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

@dataclass
class EvaluationReport:
    dice: float
    iou: float
    hd95: float
    ncc: Optional[float] = None
    ssim: Optional[float] = None
    dc: Dict[str, float] = field(default_factory=dict)
    per_slice_dice: List[float] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        assert abs(self.iou - iou_from_dice(self.dice)) <= 1e-9, "iou/dice identity violated"

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "iou": self.iou,
            "hd95": self.hd95,
            "ncc": self.ncc,
            "ssim": self.ssim,
            "dc": dict(self.dc),
            "dc_abs": {k: abs(v) for k, v in self.dc.items()},
            "per_slice_dice": list(self.per_slice_dice),
            "flags": list(self.flags),
        }


def evaluate_all(candidate, reference: Volume3D, intensity_pair=None) -> EvaluationReport:
    """Every metric for a candidate reconstruction against a reference.

    ``candidate`` is a :class:`Volume3D` or a mask :class:`SliceStack` (taken
    on the reference's voxel grid). Extents for both volumes are measured
    along the reference's principal axes. NCC and SSIM are computed only
    when an explicit ``(image_a, image_b)`` pair is supplied.
    """
    from .volume import extents, pca_axes, volume_cm3  # volume imports metrics-free modules only

    if isinstance(candidate, SliceStack):
        data = np.stack([np.asarray(m.data) for m in candidate.slices])
        candidate = Volume3D(data, reference.spacing)
    if candidate.shape != reference.shape:
        raise ShapeError(f"candidate {candidate.shape} vs reference {reference.shape}")
    flags: List[str] = []
    if not candidate.data.any() and not reference.data.any():
        flags.append("both_empty")
    d = dice(candidate, reference)
    j = iou_from_dice(d)
    h = hd95(candidate, reference)
    per_slice = [dice(c, r) for c, r in zip(candidate.data, reference.data)]

    axes = pca_axes(reference)
    if axes.degenerate:
        flags.append("degenerate_reference_axes")
    e_c, e_r = extents(candidate, axes), extents(reference, axes)
    dcs = {}
    for name, qm, qc in (("L", e_c.L, e_r.L), ("W", e_c.W, e_r.W), ("T", e_c.T, e_r.T),
                         ("Vol", volume_cm3(candidate), volume_cm3(reference))):
        if qc > 0:
            dcs[name] = dc(qm, qc)
        else:
            flags.append(f"dc_{name}_undefined")

    ncc_v = ssim_v = None
    if intensity_pair is not None:
        ia, ib = intensity_pair
        ncc_v = ncc_global(ia, ib)
        ssim_v = ssim(ia, ib)
    return EvaluationReport(d, j, h, ncc_v, ssim_v, dcs, per_slice, flags)
