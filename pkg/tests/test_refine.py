import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slicerecon.errors import InvalidParams, NumericalDivergence, ShapeError, SliceError
from slicerecon.metrics import dice
from slicerecon.ocm import register_stack, warp_similarity
from slicerecon.phantom import PhantomConfig, generate_phantom, superellipse_mask
from slicerecon.refine.loss import local_ncc, loss_and_grad, loss_us, smoothness
from slicerecon.refine.predictor import (PredictorParams, TrainConfig, predictor_apply, torch_loss_us,
                                         train_amortized)
from slicerecon.refine.stack import refine_stack
from slicerecon.refine.variational import RefineConfig, descend, refine_variational
from slicerecon.refine.warp import fold_fraction, warp_array, warp_dense
from slicerecon.types import DisplacementField, Image2D, Mask2D, SliceStack


def _smooth_image(rng, shape=(16, 16)):
    from scipy import ndimage as ndi
    return ndi.gaussian_filter(rng.random(shape), 1.5)


def _blob(size=48, a=14.0, b=9.0):
    return Mask2D(superellipse_mask(size, a, b, 2.5, 0.35))


# ---------------------------------------------------------------- warping

def test_zero_field_bit_equal(rng):
    img = Image2D(rng.random((9, 11)))
    assert np.array_equal(warp_dense(img, DisplacementField.zeros(9, 11)).data, img.data)
    m = _blob()
    assert np.array_equal(warp_dense(m, DisplacementField.zeros(48, 48)).data, m.data)


def test_constant_field_pulls_content_left(rng):
    src = rng.random((6, 10))
    out = warp_array(src, np.stack([np.full((6, 10), 2.0), np.zeros((6, 10))]))
    # out(x, y) = src(x + 2, y); the last two columns sample off-canvas
    assert np.allclose(out[:, :-2], src[:, 2:])
    assert np.all(out[:, -2:] == 0.0)


def test_field_off_canvas_gives_background(rng):
    img = Image2D(rng.random((8, 8)))
    phi = DisplacementField(np.full((8, 8), 100.0), np.zeros((8, 8)))
    assert not warp_dense(img, phi).data.any()
    assert not warp_dense(_blob(8, 3, 3), phi).data.any()


def test_warp_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        warp_dense(_blob(), DisplacementField.zeros(10, 10))


# ---------------------------------------------------------------- NCC and smoothness

def test_local_ncc_identities(rng):
    a = rng.random((20, 20))
    assert local_ncc(a, a) == pytest.approx(1.0, abs=1e-9)
    assert local_ncc(a, 0.5 * a + 0.2) == pytest.approx(1.0, abs=1e-9)
    assert local_ncc(a, 1.0 - a) == pytest.approx(-1.0, abs=1e-9)


@settings(max_examples=30)
@given(st.floats(0.01, 10.0), st.floats(-5.0, 5.0), st.integers(0, 2**32 - 1))
def test_local_ncc_affine_invariance(alpha, beta, seed):
    a = np.random.default_rng(seed).random((12, 12))
    assert local_ncc(a, alpha * a + beta) == pytest.approx(1.0, abs=1e-9)


def test_local_ncc_in_range(rng):
    for _ in range(10):
        v = local_ncc(rng.random((15, 15)), rng.random((15, 15)))
        assert -1.0 <= v <= 1.0


def test_smoothness_examples():
    assert smoothness(DisplacementField.zeros(5, 5)) == 0.0
    assert smoothness(DisplacementField(np.full((5, 5), 3.0), np.full((5, 5), -1.0))) == 0.0
    xx = np.tile(np.arange(6, dtype=float), (4, 1))
    assert smoothness(DisplacementField(xx, np.zeros((4, 6)))) == pytest.approx(0.5)


# ---------------------------------------------------------------- loss

def test_loss_examples(rng):
    a = rng.random((16, 16))
    zero = np.zeros((2, 16, 16))
    assert loss_us(a, a, zero, 0.01) == pytest.approx(-1.0, abs=1e-9)
    b = rng.random((16, 16))
    phi = rng.normal(size=(2, 16, 16))
    assert loss_us(a, b, phi, 0.0) == -local_ncc(a, warp_array(b, phi))
    assert loss_us(a, b, phi, 0.1) > loss_us(a, b, phi, 0.01)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0))
def test_loss_identity_pair_is_minus_one(seed, lam):
    a = np.random.default_rng(seed).random((12, 12))
    assert loss_us(a, a, np.zeros((2, 12, 12)), lam) == pytest.approx(-1.0, abs=1e-9)


def _fd_gradient(I, M, p, lam, eps=1e-6):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        hi, lo = p.copy(), p.copy()
        hi[idx] += eps
        lo[idx] -= eps
        g[idx] = (loss_and_grad(I, M, hi, lam)[0] - loss_and_grad(I, M, lo, lam)[0]) / (2 * eps)
    return g


def test_gradient_matches_finite_differences(rng):
    I, M = _smooth_image(rng), _smooth_image(rng)
    p = rng.uniform(-1.5, 1.5, (2, 16, 16))
    loss, g = loss_and_grad(I, M, p, 0.05)
    assert loss == pytest.approx(loss_us(I, M, p, 0.05), abs=1e-12)
    fd = _fd_gradient(I, M, p, 0.05)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_torch_loss_matches_numpy(rng):
    I, M = _smooth_image(rng), _smooth_image(rng)
    p = rng.uniform(-2, 2, (2, 16, 16))
    t = lambda a: torch.from_numpy(a)[None]
    got = torch_loss_us(t(I)[None], t(M)[None], t(p), 0.01).item()
    assert got == pytest.approx(loss_us(I, M, p, 0.01), abs=1e-10)


# ---------------------------------------------------------------- variational backend

def test_refine_identical_pair():
    m = _blob()
    phi, trace = refine_variational(m, m)
    assert trace[-1] <= -1 + 1e-6
    assert phi.max_magnitude() <= 0.1


def test_refine_recovers_small_shift():
    fixed = _blob(48)
    shift = DisplacementField(np.full((48, 48), 2.0), np.zeros((48, 48)))
    moving = warp_dense(fixed, shift)
    phi, trace = refine_variational(fixed, moving)
    before = dice(fixed, moving)
    after = dice(fixed, warp_dense(moving, phi))
    assert after >= before + 0.02
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_trace_monotone_on_random_pairs(rng):
    for _ in range(3):
        I, M = _smooth_image(rng, (24, 24)), _smooth_image(rng, (24, 24))
        _, trace = descend(I, M, RefineConfig(steps=40))
        assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_divergence_reports_iteration():
    I = np.full((12, 12), np.nan)
    with pytest.raises(NumericalDivergence) as info:
        descend(I, I, RefineConfig(steps=3))
    assert info.value.iteration == 0


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(lam=0.0)
    with pytest.raises(ValueError):
        RefineConfig(window=4)
    with pytest.raises(ValueError):
        RefineConfig(backend="gpu")
    assert RefineConfig.from_dict(RefineConfig(lam=0.1).to_dict()).lam == 0.1


def test_fold_fraction_of_identity_and_fold():
    assert fold_fraction(np.zeros((2, 8, 8))) == 0.0
    xx = np.tile(np.arange(8, dtype=float), (8, 1))
    # u = -2x reverses the x axis: every Jacobian determinant is negative
    assert fold_fraction(np.stack([-2 * xx, np.zeros((8, 8))])) == 1.0


# ---------------------------------------------------------------- stack refinement

def test_refine_stack_identical_slices():
    m = _blob()
    refined, fields, traces = refine_stack(SliceStack((m, m, m), 4.0))
    assert all(f.max_magnitude() <= 0.1 for f in fields)
    assert np.array_equal(refined[0].data, m.data)
    assert traces[0] == []


def _nonrigid_phantom(seed=1):
    return generate_phantom(PhantomConfig(size=64, spacing_mm=2.0, n_slices=5, amplitude=3.0, seed=seed))


def test_refine_stack_improves_dice_and_composes():
    ph = _nonrigid_phantom()
    ocm = register_stack(ph.perturbed)
    refined, fields, _ = refine_stack(ocm.aligned)
    before = np.mean([dice(a, t) for a, t in zip(ocm.aligned, ph.truth)])
    after = np.mean([dice(a, t) for a, t in zip(refined, ph.truth)])
    assert after > before
    # composition: the field acts after the similarity transform
    for i in range(len(refined)):
        expect = warp_dense(warp_similarity(ph.perturbed[i], ocm.transforms[i]), fields[i])
        assert np.array_equal(refined[i].data, expect.data)


def test_lambda_controls_smoothness():
    ph = _nonrigid_phantom(seed=2)
    aligned = register_stack(ph.perturbed).aligned
    pair = SliceStack((aligned[1], aligned[2]), 4.0)
    _, stiff, _ = refine_stack(pair, RefineConfig(lam=0.1))
    _, loose, _ = refine_stack(pair, RefineConfig(lam=0.001))
    assert smoothness(stiff[1]) < smoothness(loose[1])


def test_unchained_mode_uses_raw_predecessor():
    ph = _nonrigid_phantom(seed=3)
    aligned = register_stack(ph.perturbed).aligned
    cfg = RefineConfig(chained=False, steps=30)
    _, fields, _ = refine_stack(aligned, cfg)
    phi, _ = refine_variational(aligned[2], aligned[3], cfg)
    assert np.array_equal(fields[3].u, phi.u)


def test_refine_stack_errors_carry_index():
    m = _blob()
    with pytest.raises(SliceError):
        refine_stack(SliceStack((m, m), 4.0), RefineConfig(backend="amortized"))


# ---------------------------------------------------------------- amortized backend

@pytest.fixture(scope="module")
def init_params():
    return PredictorParams.initialize(0)


def test_parameter_count(init_params):
    n = init_params.n_parameters()
    assert abs(n - 1.2e6) <= 0.1 * 1.2e6


def test_zero_head_gives_zero_field(init_params, rng):
    phi = predictor_apply(init_params, rng.random((40, 36)), rng.random((40, 36)))
    assert phi.shape == (40, 36)
    assert phi.max_magnitude() == 0.0


def test_predictor_deterministic(init_params, rng):
    state = {k: v.copy() for k, v in init_params.state.items()}
    head = [k for k in state if k.startswith("head")]
    for k in head:
        state[k] = np.random.default_rng(1).normal(scale=0.01, size=state[k].shape).astype(state[k].dtype)
    params = PredictorParams(state)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    p1, p2 = predictor_apply(params, a, b), predictor_apply(params, a, b)
    assert p1.max_magnitude() > 0
    assert np.array_equal(p1.u, p2.u) and np.array_equal(p1.v, p2.v)
    with pytest.raises(ShapeError):
        predictor_apply(params, a, rng.random((32, 16)))


def test_nonfinite_weights_rejected(init_params):
    state = {k: v.copy() for k, v in init_params.state.items()}
    k = next(iter(state))
    state[k] = np.full_like(state[k], np.nan)
    with pytest.raises(InvalidParams):
        predictor_apply(PredictorParams(state), np.zeros((16, 16)), np.zeros((16, 16)))


def test_params_save_load(init_params, tmp_path):
    p = PredictorParams(init_params.state, [0.5, 0.25])
    p.save(tmp_path / "w.npz")
    back = PredictorParams.load(tmp_path / "w.npz")
    assert back.train_loss == [0.5, 0.25]
    assert all(np.array_equal(back.state[k], v) for k, v in init_params.state.items())


def test_zero_epochs_returns_initialization(init_params, rng):
    pair = (rng.random((16, 16)), rng.random((16, 16)))
    out = train_amortized([pair], TrainConfig(epochs=0), init=init_params)
    assert out.train_loss == []
    assert all(np.array_equal(out.state[k], v) for k, v in init_params.state.items())


def test_training_identical_pair_and_determinism():
    a = _blob(64, 20, 12).astype_float()
    cfg = TrainConfig(epochs=5, seed=3)
    p1 = train_amortized([(a, a)], cfg)
    p2 = train_amortized([(a, a)], cfg)
    assert p1.train_loss == p2.train_loss
    assert min(p1.train_loss) <= -0.99
    assert all(np.array_equal(p1.state[k], p2.state[k]) for k in p1.state)


def test_training_lowers_loss(rng):
    fixed = _blob(32, 10, 7)
    moving = warp_dense(fixed, DisplacementField(np.full((32, 32), 1.0), np.zeros((32, 32))))
    cfg = RefineConfig()
    from slicerecon.refine.variational import prepare
    pair = (prepare(fixed, cfg), prepare(moving, cfg))
    out = train_amortized([pair], TrainConfig(epochs=30, lr=1e-3))
    assert out.train_loss[-1] < out.train_loss[0]
