"""Per-pair residual refinement by gradient descent on the registration loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from typing import List, Tuple

import numpy as np
from scipy import ndimage as ndi

from ..errors import NumericalDivergence, ShapeError
from ..types import DisplacementField, Mask2D
from .loss import loss_and_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    lam: float = 0.01
    window: int = 9
    steps: int = 300
    step_size: float = 0.5         # max per-iteration displacement update, pixels
    backend: str = "variational"   # or "amortized"
    mask_sigma: float = 0.5        # Gaussian pre-smoothing applied to mask inputs
    max_backtracks: int = 8
    grad_sigma: float = 2.0        # Gaussian preconditioning of the gradient (0 disables)
    chained: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.backend not in ("variational", "amortized"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def prepare(raster, cfg: RefineConfig) -> np.ndarray:
    """Float array fed to the loss; masks are softened so the loss sees a gradient."""
    if isinstance(raster, Mask2D):
        arr = raster.astype_float()
        if cfg.mask_sigma > 0:
            arr = ndi.gaussian_filter(arr, cfg.mask_sigma, mode="constant")
        return arr
    if hasattr(raster, "astype_float"):
        return raster.astype_float()
    return np.asarray(raster, dtype=np.float64)


def descend(I: np.ndarray, M: np.ndarray, cfg: RefineConfig, phi0=None) -> Tuple[np.ndarray, List[float]]:
    """Backtracking gradient descent from ``phi0`` (zero by default).

    Each step moves the field by at most ``step`` pixels along the negative
    gradient; a step that fails to lower the loss is halved until it does,
    so the recorded loss never increases.
    """
    if I.shape != M.shape:
        raise ShapeError(f"shapes differ: {I.shape} vs {M.shape}")
    phi = np.zeros((2,) + I.shape) if phi0 is None else np.array(phi0, dtype=np.float64)
    loss, grad = loss_and_grad(I, M, phi, cfg.lam, cfg.window)
    if not (math.isfinite(loss) and np.isfinite(grad).all()):
        raise NumericalDivergence("non-finite initial loss or gradient", iteration=0)
    trace = [loss]
    step = cfg.step_size
    for it in range(1, cfg.steps + 1):
        direction = grad
        if cfg.grad_sigma > 0:
            direction = np.stack([ndi.gaussian_filter(g, cfg.grad_sigma) for g in grad])
        gmax = np.abs(direction).max()
        if not math.isfinite(gmax):
            raise NumericalDivergence("non-finite gradient", iteration=it)
        if gmax == 0:
            break
        accepted = False
        trial_step = step
        for _ in range(cfg.max_backtracks + 1):
            cand = phi - (trial_step / gmax) * direction
            c_loss, c_grad = loss_and_grad(I, M, cand, cfg.lam, cfg.window)
            if not math.isfinite(c_loss):
                raise NumericalDivergence("non-finite loss", iteration=it)
            if c_loss < loss:
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            break
        phi, loss, grad = cand, c_loss, c_grad
        trace.append(loss)
        step = min(cfg.step_size, trial_step * 2.0)
    return phi, trace


def refine_variational(fixed, moving, cfg: RefineConfig = RefineConfig()):
    """Estimate the residual field warping ``moving`` onto ``fixed``.

    Returns the best field found and the per-iteration loss trace.
    """
    I = prepare(fixed, cfg)
    M = prepare(moving, cfg)
    phi, trace = descend(I, M, cfg)
    return DisplacementField.from_array(phi), trace
