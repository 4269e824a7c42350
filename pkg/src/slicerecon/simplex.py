"""Nelder-Mead downhill simplex for unconstrained minimization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    nfev: int
    nit: int
    converged: bool


def nelder_mead(
    func: Callable[[np.ndarray], float],
    x0: Sequence[float],
    steps: Sequence[float],
    ftol: float = 1e-6,
    xtol: float = 1e-9,
    maxfev: int = 2000,
    fatol: float = 1e-12,
) -> SimplexResult:
    """Minimize ``func`` starting from an axis-aligned simplex around ``x0``.

    Stops when the spread of function values over the simplex drops below
    ``ftol * |f_best| + fatol`` or the simplex collapses below ``xtol``;
    otherwise after ``maxfev`` evaluations with ``converged=False``.
    Standard coefficients (reflection 1, expansion 2, contraction 1/2,
    shrink 1/2).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    if n == 0:
        return SimplexResult(x0.copy(), float(func(x0)), 1, 0, True)

    sim = np.empty((n + 1, n))
    sim[0] = x0
    for i in range(n):
        sim[i + 1] = x0
        sim[i + 1, i] += steps[i] if steps[i] != 0 else 0.05
    fsim = np.array([func(v) for v in sim], dtype=np.float64)
    nfev = n + 1
    nit = 0
    converged = False

    while True:
        order = np.argsort(fsim, kind="stable")
        sim = sim[order]
        fsim = fsim[order]

        spread = fsim[-1] - fsim[0]
        size = np.max(np.abs(sim[1:] - sim[0]))
        if spread <= ftol * abs(fsim[0]) + fatol or size <= xtol:
            converged = True
            break
        if nfev >= maxfev:
            break
        nit += 1

        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        fr = func(xr)
        nfev += 1

        if fr < fsim[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            fe = func(xe)
            nfev += 1
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
            continue

        if fr < fsim[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = func(xc)
            nfev += 1
            if fc <= fr:
                sim[-1], fsim[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (sim[-1] - centroid)
            fc = func(xc)
            nfev += 1
            if fc < fsim[-1]:
                sim[-1], fsim[-1] = xc, fc
                continue

        for i in range(1, n + 1):
            sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
            fsim[i] = func(sim[i])
        nfev += n

    best = int(np.argmin(fsim))
    return SimplexResult(sim[best].copy(), float(fsim[best]), nfev, nit, converged)
