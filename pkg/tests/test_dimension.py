import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlsm import augmentation as aug_mod
from dlsm.dimension import (dimension_probabilities, laplace_log_marginal,
                            log_prior_trajectories, sample_dimension,
                            smoothed_mode)
from dlsm.model_core import (AugmentedState, GlobalParams, ModelConfig,
                             log_intensity_all)
from dlsm.synthetic import DGPSpec, generate


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
       st.floats(-1e3, 1e3))
@settings(max_examples=60, deadline=None)
def test_probabilities_shift_invariant(logml, c):
    w = np.full(len(logml), 1.0 / len(logml))
    p1 = dimension_probabilities(logml, w)
    p2 = dimension_probabilities(np.asarray(logml) + c, w)
    np.testing.assert_allclose(p1, p2, rtol=1e-9, atol=1e-12)


def test_single_candidate_always_one(rng):
    assert all(sample_dimension([-1e4], [1.0], rng) == 1 for _ in range(50))


def test_equal_values_give_prior(rng):
    p = dimension_probabilities(np.full(4, -321.0), np.full(4, 0.25))
    np.testing.assert_allclose(p, 0.25)
    draws = np.array([sample_dimension(np.full(4, 7.0), np.full(4, 0.25),
                                       rng) for _ in range(8000)])
    freq = np.bincount(draws, minlength=5)[1:] / 8000
    assert np.all(np.abs(freq - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 8000))
    with pytest.raises(FloatingPointError):
        dimension_probabilities([-np.inf, -np.inf], [0.5, 0.5])


def _one_zero_count_stats():
    counts = np.zeros((1, 1), dtype=int)
    aug = AugmentedState(np.array([[1.5]]), np.full((1, 1), np.nan),
                         np.array([[0]]), np.array([[-1]]),
                         np.ones((1, 1), bool), np.ones((1, 1)))
    return aug_mod.PseudoStats(counts, aug)


def test_single_zero_count_has_one_pseudo_observation():
    assert _one_zero_count_stats().total == 1


def _nodewise(T, N, d):
    cfg = ModelConfig(parametrization='nodewise', upsilon_structure='full',
                      phi_structure='full', d=d)
    params = GlobalParams(np.zeros(N), np.zeros((N, 1)), 0.5 * np.eye(d),
                          np.eye(d))
    return cfg, params


def test_penalty_term(rng):
    T, N = 3, 4
    counts = rng.poisson(2.0, (T, 6))
    for d in (1, 2, 3):
        cfg, params = _nodewise(T, N, d)
        x = rng.standard_normal((T, N, d))
        x0 = rng.standard_normal((N, d))
        aug = AugmentedState(*aug_mod.sample_poisson_layer(
            counts, np.zeros((T, 6)), rng), np.ones((T, 6), bool),
            np.ones((T, 6)))
        st_ = aug_mod.PseudoStats(counts, aug)
        base = (st_.loglik(log_intensity_all(params.alpha, x))
                + log_prior_trajectories(x, x0, params, cfg))
        for pen, slices in (('dT1N', T + 1), ('dTN', T)):
            val = laplace_log_marginal(x, x0, st_, params.alpha, params,
                                       cfg.replace(laplace_penalty=pen))
            expect = -0.5 * d * slices * N * np.log(st_.total)
            assert abs(val - base - expect) < 1e-9 * abs(val)


def test_log_prior_nodewise_matches_scipy(rng):
    from scipy import stats
    T, N, d = 3, 2, 2
    cfg, params = _nodewise(T, N, d)
    params.cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    x = rng.standard_normal((T, N, d))
    x0 = rng.standard_normal((N, d))
    ref = stats.norm.logpdf(x0).sum()
    prev = x0
    for t in range(T):
        ref += stats.multivariate_normal.logpdf(
            x[t] - prev @ params.phi.T, cov=params.cov).sum()
        prev = x[t]
    assert abs(log_prior_trajectories(x, x0, params, cfg) - ref) < 1e-10


def test_smoothed_mode_without_observations_is_prior_mean():
    T, N, d = 4, 3, 2
    cfg, params = _nodewise(T, N, d)
    W = np.zeros((T, N, N))
    R = np.zeros((T, N, N))
    x0 = np.arange(N * d, dtype=float).reshape(N, d) / 5
    x_start = np.ones((T, N, d))
    xh, _ = smoothed_mode(x_start, x0, W, R, params, cfg)
    expect = np.stack([x0 @ np.linalg.matrix_power(params.phi, t + 1).T
                       for t in range(T)])
    np.testing.assert_allclose(xh, expect, atol=1e-12)
    xh2, x0h2 = smoothed_mode(x_start, x0, W, R, params, cfg)
    np.testing.assert_array_equal(xh, xh2)
    # the starting arrays are left untouched
    assert np.all(x_start == 1.0)


def test_extra_dimension_lowers_value_at_truth():
    spec = DGPSpec(n_nodes=25, n_times=15, d=2)
    data, truth = generate(spec, seed=3)
    rng = np.random.default_rng(0)
    aug = AugmentedState(*aug_mod.sample_poisson_layer(
        data.counts, truth.loglam, rng), truth.w > 0.5, truth.z)
    st_ = aug_mod.PseudoStats(data.counts, aug)
    W, R = st_.node_arrays(truth.alpha)
    N = spec.n_nodes
    params = GlobalParams(truth.alpha, truth.beta, 0.3 * np.eye(N),
                          np.linalg.inv(truth.sigma))
    cfg = ModelConfig(parametrization='featurewise', d_max=3)
    vals = {}
    for d in (1, 2, 3):
        x = np.zeros((spec.n_times, N, d))
        x0 = np.zeros((N, d))
        k = min(d, 2)
        x[..., :k] = truth.x[..., :k]
        x0[:, :k] = truth.x0[:, :k]
        if d == 3:
            x[..., 2] = 0.1 * rng.standard_normal(x.shape[:2])
        xh, x0h = smoothed_mode(x, x0, W, R, params, cfg, n_scans=3)
        vals[d] = laplace_log_marginal(xh, x0h, st_, truth.alpha, params,
                                       cfg)
    assert vals[3] < vals[2]
    assert vals[1] < vals[2]
