import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slicerecon.errors import InvalidConfig
from slicerecon.metrics import dice
from slicerecon.phantom import (PhantomConfig, axial_profile, generate_phantom, sample_smooth_field,
                                sample_transform, superellipse_area, superellipse_mask)
from slicerecon.types import ParameterBounds

SMALL = dict(size=64, spacing_mm=2.0, n_slices=5)


def test_identity_perturbation_is_bit_equal():
    ph = generate_phantom(PhantomConfig(**SMALL, bounds=ParameterBounds.identity(), amplitude=0.0))
    for t, p in zip(ph.truth, ph.perturbed):
        assert np.array_equal(t.data, p.data)
        assert dice(t, p) == 1.0


def test_deterministic_for_fixed_seed():
    cfg = PhantomConfig(**SMALL, amplitude=2.0, seed=7)
    a, b = generate_phantom(cfg), generate_phantom(cfg)
    assert a.gt_transforms == b.gt_transforms
    for x, y in zip(a.perturbed, b.perturbed):
        assert np.array_equal(x.data, y.data)
    for x, y in zip(a.gt_fields, b.gt_fields):
        assert np.array_equal(x.u, y.u) and np.array_equal(x.v, y.v)


def test_first_slice_is_anchor():
    ph = generate_phantom(PhantomConfig(**SMALL, amplitude=2.0, seed=3))
    assert ph.gt_transforms[0].is_identity()
    assert np.array_equal(ph.truth[0].data, ph.perturbed[0].data)
    assert ph.gt_fields[0].max_magnitude() == 0.0


def test_sampled_transforms_within_bounds():
    ph = generate_phantom(PhantomConfig(size=64, n_slices=10, seed=1))
    b = PhantomConfig(size=64).perturbation_bounds()
    assert all(b.contains(T, 1e-12) for T in ph.gt_transforms)
    rng = np.random.default_rng(0)
    wide = ParameterBounds(s=(0.8, 1.2), theta=(-math.pi / 4, math.pi / 4), tx=(-32, 32), ty=(-32, 32))
    for _ in range(1000):
        T = sample_transform(rng, wide)
        assert 0.8 <= T.s <= 1.2 and abs(T.theta) <= math.pi / 4 + 1e-15
        assert abs(T.tx) <= 32 and abs(T.ty) <= 32


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        generate_phantom(PhantomConfig(semi_axes_mm=(0.0, 10.0)))
    with pytest.raises(InvalidConfig):
        generate_phantom(PhantomConfig(amplitude=-1.0))
    too_wide = ParameterBounds(s=(0.5, 1.2), theta=(0, 0), tx=(0, 0), ty=(0, 0))
    with pytest.raises(InvalidConfig):
        generate_phantom(PhantomConfig(bounds=too_wide))


def test_smooth_field_examples():
    z = sample_smooth_field(32, 0.0, 1)
    assert z.max_magnitude() == 0.0
    f = sample_smooth_field(48, 3.0, 5)
    # exhaustive maximum over the field
    mag = np.sqrt(np.asarray(f.u, np.float64) ** 2 + np.asarray(f.v, np.float64) ** 2)
    assert mag.max() <= 3.0
    assert mag.max() > 2.9
    g = sample_smooth_field(48, 3.0, 5)
    assert np.array_equal(f.u, g.u) and np.array_equal(f.v, g.v)


@given(st.floats(0.0, 6.0), st.integers(0, 2**31 - 1))
def test_smooth_field_bound_property(amplitude, seed):
    f = sample_smooth_field(24, amplitude, seed)
    assert f.max_magnitude() <= amplitude


def test_superellipse_area_matches_pixel_count():
    m = superellipse_mask(201, 60.0, 35.0, 2.5)
    assert m.sum() == pytest.approx(superellipse_area(60.0, 35.0, 2.5), rel=0.01)


def test_axial_profile_symmetric_and_bounded():
    p = axial_profile(PhantomConfig(n_slices=9))
    assert np.allclose(p, p[::-1])
    assert p.max() == pytest.approx(1.0) and p.min() > 0
