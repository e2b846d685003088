import numpy as np
import mpmath
import pytest

from dlsm import iams_tables as it
from oracles import augmented_pmf_mc, poisson_pmf


def test_schedule():
    assert [it.component_schedule(n) for n in (1, 4, 5, 19, 20, 100, 101)] \
        == [10, 10, 6, 6, 3, 3, 1]


def test_exact_moments_against_series():
    m, v = it.exact_moments(1)
    assert abs(m - float(mpmath.euler)) < 1e-12
    assert abs(v - float(mpmath.zeta(2))) < 1e-12


def test_density_normalised():
    from scipy import integrate
    for nu in (1, 7, 60):
        val, _ = integrate.quad(lambda e: np.exp(it.log_density(e, nu)),
                                -np.inf, np.inf, limit=200)
        assert abs(val - 1.0) < 1e-8


def test_nu1_moments():
    mix = it.lookup(1)
    assert abs(mix.mean() - float(mpmath.euler)) < 1e-2
    assert abs(mix.var() - np.pi ** 2 / 6) < 1e-2


def test_asymptotic_branch():
    mix = it.lookup(10 ** 4)
    assert mix.R == 1
    assert abs(mix.variances[0] - 1e-4) < 1e-7
    assert abs(mix.means[0] - it.exact_moments(10 ** 4)[0]) < 1e-14
    assert it.lookup(it.NU_TAB + 1).R == 1


def test_lookup_deterministic():
    a, b = it.lookup(1), it.lookup(1)
    for f in ('weights', 'means', 'variances'):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    with pytest.raises(ValueError):
        it.lookup(0)


def test_cached_tables_certified():
    for nu in range(1, it.NU_TAB + 1):
        mix = it.lookup(nu)
        assert mix.R == it.component_schedule(nu)
        assert abs(mix.weights.sum() - 1.0) < 1e-10
        assert np.all(mix.variances > 0)
        assert it.kl_divergence(mix) <= it.DEFAULT_TOL
        m, v = it.exact_moments(nu)
        assert abs(mix.mean() - m) < 1e-2 and abs(mix.var() - v) < 1e-2
        q = it.exact_quantile(np.array([0.25, 0.5, 0.75]), nu)
        assert np.max(np.abs(mix.cdf(q) - [0.25, 0.5, 0.75])) <= 0.01


def test_kl_decreases_with_components():
    kl4 = it.kl_divergence(it.fit_mixture(5, R=4))
    kl10 = it.kl_divergence(it.fit_mixture(5, R=10))
    assert kl10 <= kl4


def test_fit_failure_is_explicit():
    with pytest.raises(it.MixtureFitError):
        it.fit_mixture(1, R=1, tol=1e-8)


def test_cache_round_trip_and_checksum(tmp_path):
    tables = {nu: it.lookup(nu) for nu in (1, 2, 30)}
    path = str(tmp_path / 'tab.csv')
    it.write_cache(tables, path)
    back = it.read_cache(path)
    for nu, mix in tables.items():
        assert np.array_equal(back[nu].weights, mix.weights)
        assert np.array_equal(back[nu].means, mix.means)
        assert np.array_equal(back[nu].variances, mix.variances)
    text = open(path).read().replace('1,0,', '1,0,9', 1)
    open(path, 'w').write(text)
    assert it.read_cache(path) is None
    assert it.read_cache(str(tmp_path / 'missing.csv')) is None


def test_bank_matches_lookup():
    bank = it.default_bank()
    log_c, mu, s2 = bank.params(np.array([1, 7, 250]))
    m7 = it.lookup(7)
    np.testing.assert_allclose(np.exp(log_c[1, :m7.R]), m7.weights)
    np.testing.assert_allclose(mu[1, :m7.R], m7.means)
    assert np.exp(log_c[2, 0]) == 1.0 and np.all(np.isinf(log_c[2, 1:]))
    assert abs(s2[2, 0] - it.exact_moments(250)[1]) < 1e-15


@pytest.mark.parametrize('y,lam', [(0, 1.0), (3, 2.0), (7, 5.0)])
def test_augmentation_marginalises_to_poisson(y, lam):
    rng = np.random.default_rng(100 + y)
    p, se = augmented_pmf_mc(y, lam, 10 ** 6, rng)
    assert abs(p - poisson_pmf(y, lam)) <= 3 * se
