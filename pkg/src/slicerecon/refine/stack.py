"""Stack-level residual refinement on top of the global alignment."""

from __future__ import annotations

import logging
from typing import List, Optional, Tuple

from ..errors import ReconError, SliceError
from ..types import DisplacementField, SliceStack
from .predictor import PredictorParams, predictor_apply
from .variational import RefineConfig, prepare, refine_variational
from .warp import warp_dense

logger = logging.getLogger(__name__)


def estimate_field(fixed, moving, cfg: RefineConfig, params: Optional[PredictorParams] = None):
    """Residual field for one pair with the configured backend.

    Returns ``(field, trace)``; the amortized backend has an empty trace.
    """
    if cfg.backend == "amortized":
        if params is None:
            raise ReconError("the amortized backend needs trained predictor parameters")
        return predictor_apply(params, prepare(fixed, cfg), prepare(moving, cfg)), []
    return refine_variational(fixed, moving, cfg)


def refine_stack(aligned: SliceStack, cfg: RefineConfig = RefineConfig(),
                 params: Optional[PredictorParams] = None) -> Tuple[SliceStack, List[DisplacementField], List[list]]:
    """Warp every slice after the first onto its refined predecessor.

    The first slice is kept as is with a zero field. With ``cfg.chained``
    off, each slice is matched to its unrefined predecessor instead.
    Returns the refined stack, the per-slice fields and the loss traces.
    """
    h, w = aligned.shape
    refined = [aligned[0]]
    fields = [DisplacementField.zeros(h, w)]
    traces: List[list] = [[]]
    for i in range(1, len(aligned)):
        fixed = refined[i - 1] if cfg.chained else aligned[i - 1]
        try:
            phi, trace = estimate_field(fixed, aligned[i], cfg, params)
            out = warp_dense(aligned[i], phi)
        except Exception as exc:  # noqa: BLE001 - re-raised with the slice index
            raise SliceError(i, exc) from exc
        refined.append(out)
        fields.append(phi)
        traces.append(trace)
        logger.debug("slice %d: max|phi|=%.3f, %d iterations", i, phi.max_magnitude(), len(trace))
    return aligned.replace(refined), fields, traces
