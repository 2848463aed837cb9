"""Shrinkage heads against the ISTA oracle, and threshold adaptation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dninn.denoiser import (
    L1Problem,
    LISTAHead,
    STHead,
    UnsupportedHeadError,
    adapt_thresholds,
    dictionary_lipschitz,
    init_lista_head,
    init_st_head,
    ista_solve,
    lista_denoise,
    lista_from_ista,
    st_denoise,
)
from dninn.model import HParams, init_model
from dninn.tensor import conv2d


def identity_dictionary(c=3, f=3):
    d = np.zeros((c, c, f, f))
    d[np.arange(c), np.arange(c), f // 2, f // 2] = 1.0
    return d


# --- soft-threshold head -------------------------------------------------------------


def test_st_zero_threshold_is_identity(rng):
    z = rng.standard_normal((2, 3, 5, 5))
    np.testing.assert_array_equal(st_denoise(STHead(np.zeros(3)), z), z)


def test_st_dead_zone(rng):
    z = rng.uniform(-0.49, 0.49, (2, 3, 5, 5))
    assert not np.any(st_denoise(STHead(np.array([0.5, 0.6, -0.7])), z))


def test_st_equals_converged_ista(rng):
    """The closed-form shrinkage is the minimiser ISTA converges to (D = I)."""
    z = rng.standard_normal((2, 3, 8, 8))
    head = STHead(np.array([0.3, -0.1, 0.7]))
    problem = L1Problem(z, identity_dictionary(), head.thresholds())
    g, trace = ista_solve(problem, 600)
    assert np.max(np.abs(st_denoise(head, z) - g)) <= 1e-8
    assert trace[-1] <= trace[0]


def test_st_head_gain_scales_thresholds():
    head = STHead(np.array([0.2, -0.4, 0.8]), gain=0.25)
    np.testing.assert_array_equal(head.thresholds(), [0.05, 0.1, 0.2])
    assert list(init_st_head().parameters()) == ["theta"]


# --- ISTA -------------------------------------------------------------------------------


def test_ista_one_step_identity_lands_on_z(rng):
    z = rng.standard_normal((1, 3, 6, 6))
    g, _ = ista_solve(L1Problem(z, identity_dictionary(), 0.0, mu=1.0), 1)
    np.testing.assert_array_equal(g, z)


def test_ista_objective_non_increasing_on_random_problems():
    for seed in range(50):
        r = np.random.default_rng(seed)
        cg = int(r.integers(2, 5))
        d = r.standard_normal((3, cg, 3, 3)) / 3
        z = r.standard_normal((1, 3, 7, 7))
        lam = r.uniform(0.0, 1.0, cg)
        _, trace = ista_solve(L1Problem(z, d, lam), 40)
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-12 * abs(trace[0])), (seed, diffs.max())


def test_lipschitz_estimate_against_dense_matrix(rng):
    """Power iteration vs the exact top eigenvalue of the dense D^T D."""
    d = rng.standard_normal((2, 3, 3, 3))
    shape = (1, 3, 5, 4)
    n = int(np.prod(shape))
    cols = [conv2d(e.reshape(shape), d).ravel() for e in np.eye(n)]
    mat = np.stack(cols, axis=1)
    exact = np.linalg.eigvalsh(mat.T @ mat).max()
    assert dictionary_lipschitz(d, shape, iters=500) == pytest.approx(exact, rel=1e-6)


def test_l1problem_validation(rng):
    z = rng.standard_normal((1, 3, 4, 4))
    with pytest.raises(ValueError, match="non-negative"):
        L1Problem(z, identity_dictionary(), -1.0)
    with pytest.raises(ValueError, match="mu"):
        L1Problem(z, identity_dictionary(), 0.1, mu=0.5)
    with pytest.raises(ValueError, match="channels"):
        L1Problem(z, identity_dictionary(2), 0.1)


# --- LISTA ---------------------------------------------------------------------------------


def test_lista_zero_kernels_give_zero(rng):
    head = init_lista_head(3, dtype=np.float64)
    for w in head.we + head.wg + [head.ws]:
        w[:] = 0
    assert not np.any(lista_denoise(head, rng.standard_normal((1, 3, 6, 6))))


def test_lista_from_ista_identity_dictionary(rng):
    """D = identity, mu = 1: each LISTA layer reproduces one ISTA iteration."""
    z = rng.standard_normal((2, 3, 9, 7))
    lam = np.array([0.2, 0.5, 0.1])
    problem = L1Problem(z, identity_dictionary(), lam, mu=1.0)
    _, _, iterates = ista_solve(problem, 3, return_iterates=True)
    head = lista_from_ista(identity_dictionary(), lam, 1.0, layers=3)
    out, codes = lista_denoise(head, z, return_codes=True)
    for t in range(3):
        assert np.max(np.abs(codes[t] - iterates[t])) <= 1e-10
    assert np.max(np.abs(out - iterates[-1])) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), layers=st.integers(1, 6), cg=st.integers(1, 5))
def test_lista_from_ista_pointwise_dictionary(seed, layers, cg):
    r = np.random.default_rng(seed)
    d = np.zeros((3, cg, 3, 3))
    d[:, :, 1, 1] = r.standard_normal((3, cg))
    z = r.standard_normal((1, 3, 6, 6))
    lam = r.uniform(0, 0.5, cg)
    problem = L1Problem(z, d, lam)
    _, _, iterates = ista_solve(problem, layers, return_iterates=True)
    head = lista_from_ista(d, lam, problem.mu, layers)
    out, codes = lista_denoise(head, z, return_codes=True)
    for t in range(layers):
        assert np.max(np.abs(codes[t] - iterates[t])) <= 1e-10
    np.testing.assert_allclose(out, conv2d(iterates[-1], d), atol=1e-10)


def test_lista_from_ista_rejects_spatial_dictionary(rng):
    with pytest.raises(ValueError, match="pointwise"):
        lista_from_ista(rng.standard_normal((3, 3, 3, 3)), 0.1, 10.0, 2)


def test_lista_default_init_is_near_identity(rng):
    head = init_lista_head(3, dtype=np.float64, threshold_init=0.0)
    z = rng.standard_normal((1, 3, 6, 6))
    np.testing.assert_array_equal(lista_denoise(head, z), z)
    assert head.shrinkage_parameter_count() == 3 * (81 + 81 + 3)


def test_lista_shape_validation():
    eye = identity_dictionary()
    with pytest.raises(ValueError):
        LISTAHead(we=[eye], wg=[eye, eye], thetas=[np.zeros(3)], ws=eye)


# --- threshold adaptation ------------------------------------------------------------------


def _st_model(sigma_n=50.0):
    model = init_model(HParams(pairs=1, depth=1, width=2), sigma_n, np.random.default_rng(0), np.float64)
    model.heads[0].theta[:] = [0.3, -0.2, 0.05]
    return model


def test_adapt_same_sigma_unchanged():
    model = _st_model()
    out = adapt_thresholds(model, 50.0)
    np.testing.assert_array_equal(out.heads[0].thresholds(), model.heads[0].thresholds())


@pytest.mark.parametrize("sigma_t,factor", [(25.0, 0.25), (95.0, 3.61), (15.0, 0.09)])
def test_adapt_factor(sigma_t, factor):
    model = _st_model()
    out = adapt_thresholds(model, sigma_t)
    assert out.heads[0].gain == factor
    np.testing.assert_array_equal(out.heads[0].thresholds(), model.heads[0].thresholds() * factor)
    assert out.sigma_t == sigma_t and model.sigma_t is None  # input untouched


def test_adapt_round_trip_bit_exact():
    model = _st_model()
    back = adapt_thresholds(adapt_thresholds(model, 17.0), 50.0)
    assert back.heads[0].thresholds().tobytes() == model.heads[0].thresholds().tobytes()


def test_adapt_rejects_lista_and_bad_sigma():
    model = init_model(HParams(pairs=1, depth=1, width=2, head="lista"), 25.0)
    with pytest.raises(UnsupportedHeadError):
        adapt_thresholds(model, 15.0)
    with pytest.raises(ValueError):
        adapt_thresholds(_st_model(), 0.0)
