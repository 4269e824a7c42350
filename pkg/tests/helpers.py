"""Fixture builders shared by the module tests and the acceptance suite."""

import math

import numpy as np

from slicerecon.phantom import PhantomConfig
from slicerecon.pipeline import PipelineConfig
from slicerecon.refine.variational import RefineConfig

# unit steps along the four lattice directions, keyed by the normal angle in degrees
LATTICE_STEPS = {0: (0, 1), 45: (-1, 1), 90: (1, 0), 135: (1, 1)}


def lattice_segment(size, x0, y0, normal_deg, length, noise_frac, rng):
    """One straight segment whose pixels lie exactly on its line, plus noise.

    Returns the edge mask and the analytic (rho, theta) of the line, with
    rho measured from the top-left pixel centre.
    """
    dx, dy = LATTICE_STEPS[normal_deg]
    s = np.arange(length) - length // 2
    xs, ys = x0 + s * dx, y0 + s * dy
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= size or ys.max() >= size:
        raise ValueError("segment leaves the canvas")
    m = np.zeros((size, size), bool)
    m[ys, xs] = True
    n_line = int(m.sum())
    for _ in range(int(noise_frac * n_line)):
        x, y = rng.integers(0, size, 2)
        m[y, x] = True
    theta = math.radians(normal_deg)
    return m, x0 * math.cos(theta) + y0 * math.sin(theta), theta


def cell_offset(acc, i, j, rho, theta):
    """Chebyshev distance in bins from cell (i, j) to the cell holding (rho, theta),
    using the (rho, theta) ~ (-rho, theta - pi) identity at the wrap."""
    best = None
    for r, t in ((rho, theta), (-rho, theta - math.pi), (-rho, theta + math.pi)):
        it = int(round(r / acc.rho_res)) + acc.rho_max
        jt = int(round(t / acc.theta_res))
        d = max(abs(i - it), abs(j - jt))
        best = d if best is None else min(best, d)
    return best


def small_config(out, **kw):
    cfg = PipelineConfig(
        output_dir=str(out),
        seed=3,
        phantom=PhantomConfig(size=48, spacing_mm=2.5, n_slices=4, amplitude=2.0),
        refine=RefineConfig(steps=25),
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg
