from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate, stats

from dlsm import param_updates as pu


class ZeroNoise:
    """Stand-in generator whose Gaussian noise is zero and whose gamma
    draws return their mean, so conjugate draws collapse to known values."""

    def standard_normal(self, size=None):
        return np.zeros(size)

    def gamma(self, a, scale=1.0, size=None):
        return np.broadcast_to(np.asarray(a, float) * scale,
                               size or np.shape(a)).copy()


def _stats(prec, vsum):
    return SimpleNamespace(prec=np.asarray(prec, float),
                           vsum=np.asarray(vsum, float))


# ---------------------------------------------------------------------------
# intercepts

def test_alpha_no_data_is_prior():
    P, h = pu.alpha_system(_stats(np.zeros((2, 3)), np.zeros((2, 3))),
                           np.zeros((2, 3, 1)), 5.0)
    np.testing.assert_allclose(P, np.eye(3) / 5.0)
    np.testing.assert_allclose(h, 0.0)


def test_alpha_single_observation_dense_oracle():
    # one pseudo-observation v ~ N(a0 + a1 + x0'x1, s) on dyad (0, 1)
    v, s, sa2 = 1.3, 0.4, 5.0
    x = np.array([[[0.5, -1.0], [2.0, 0.3], [0.1, 0.1]]])
    prec = np.array([[1 / s, 0.0, 0.0]])
    vsum = np.array([[v / s, 0.0, 0.0]])
    P, h = pu.alpha_system(_stats(prec, vsum), x, sa2)
    a = np.array([1.0, 1.0, 0.0])
    P_o = np.eye(3) / sa2 + np.outer(a, a) / s
    h_o = a * (v - x[0, 0] @ x[0, 1]) / s
    np.testing.assert_allclose(P, P_o, atol=1e-14)
    np.testing.assert_allclose(h, h_o, atol=1e-14)
    draw = pu.sample_alpha(_stats(prec, vsum), x, sa2, ZeroNoise())
    np.testing.assert_allclose(draw, np.linalg.solve(P_o, h_o), atol=1e-12)


def test_alpha_precision_is_prior_plus_psd(rng):
    T, N = 3, 5
    P_ = N * (N - 1) // 2
    st_ = _stats(rng.random((T, P_)), rng.standard_normal((T, P_)))
    P, _ = pu.alpha_system(st_, rng.standard_normal((T, N, 2)), 2.0)
    assert np.all(np.linalg.eigvalsh(P - np.eye(N) / 2.0) > -1e-12)


# ---------------------------------------------------------------------------
# probit coefficients

def test_beta_zero_residuals_mean_zero():
    T, N = 2, 4
    z = np.zeros((T, N * (N - 1) // 2))
    cov = np.ones((T, N, 1))
    draw = pu.sample_beta(1, z, np.zeros((N, 1)), cov, 5.0, ZeroNoise())
    np.testing.assert_allclose(draw, 0.0)


def test_beta_two_node_dense_oracle(rng):
    z = np.array([[0.8]])
    cov = np.array([[[1.0, 0.5], [1.0, -2.0]]])
    beta = np.array([[0.3, 0.1], [0.2, -0.4]])
    sb2 = 2.0
    # z = v_0'beta_0 + v_1'beta_1 + e
    v0, v1 = cov[0, 0], cov[0, 1]
    prec = np.eye(2) / sb2 + np.outer(v0, v0)
    mean = np.linalg.solve(prec, v0 * (z[0, 0] - v1 @ beta[1]))
    draw = pu.sample_beta(0, z, beta, cov, sb2, ZeroNoise())
    np.testing.assert_allclose(draw, mean, atol=1e-12)


# ---------------------------------------------------------------------------
# transitions

def test_phi_lag_regression_limit(rng):
    T = 30
    x = np.cumsum(rng.standard_normal((T, 1, 1)), axis=0)
    x0 = np.array([[0.4]])
    lag = np.concatenate([x0[None], x[:-1]])
    ols = float((x * lag).sum() / (lag * lag).sum())
    for structure in ('full', 'diagonal'):
        phi = pu.sample_phi(x, x0, np.eye(1), structure, 0.0, 1e12,
                            ZeroNoise())
        assert abs(phi[0, 0] - ols) < 1e-8


def test_phi_full_matches_dense_regression(rng):
    T, N, d = 6, 4, 2
    x = rng.standard_normal((T, N, d))
    x0 = rng.standard_normal((N, d))
    U = np.array([[1.0, 0.3], [0.3, 0.5]])
    phi = pu.sample_phi(x, x0, U, 'full', 0.1, 2.0, ZeroNoise())
    # dense GLS: x_{i,t} = (lag' kron I) vec(Phi) + e, e ~ N(0, U)
    Q = np.linalg.inv(U)
    lag = np.concatenate([x0[None], x[:-1]]).reshape(-1, d)
    cur = x.reshape(-1, d)
    prec = np.eye(d * d) / 2.0
    h = np.full(d * d, 0.1 / 2.0)
    for l, c in zip(lag, cur):
        Z = np.kron(l[None], np.eye(d))
        prec += Z.T @ Q @ Z
        h += Z.T @ Q @ c
    np.testing.assert_allclose(phi.reshape(-1, order='F'),
                               np.linalg.solve(prec, h), atol=1e-12)


def test_phi_no_information_is_prior(rng):
    x = np.zeros((4, 3, 2))
    x0 = np.zeros((3, 2))
    phi = pu.sample_phi(x, x0, np.eye(2), 'full', 0.7, 1.0, ZeroNoise())
    np.testing.assert_allclose(phi, 0.7)
    draws = np.array([pu.sample_phi_tilde(x, x0, np.eye(3), 'diagonal', 0.0,
                                          2.0, rng) for _ in range(4000)])
    diag = draws[:, np.arange(3), np.arange(3)]
    assert np.all(np.abs(diag.var(0) - 2.0) < 0.25)
    assert np.all(draws[:, 0, 1] == 0)
    fixed = pu.sample_phi(x, x0, np.eye(2), 'fixed', 0, 1, rng,
                          phi=np.eye(2))
    np.testing.assert_array_equal(fixed, np.eye(2))


def test_phi_tilde_full_matches_dense_regression(rng):
    T, N, d = 5, 3, 2
    x = rng.standard_normal((T, N, d))
    x0 = rng.standard_normal((N, d))
    om = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 1.5]])
    phi = pu.sample_phi_tilde(x, x0, om, 'full', 0.0, 3.0, ZeroNoise())
    lag = np.concatenate([x0[None], x[:-1]])
    prec = np.eye(N * N) / 3.0
    h = np.zeros(N * N)
    for t in range(T):
        for l in range(d):
            Z = np.kron(lag[t, :, l][None], np.eye(N))
            prec += Z.T @ om @ Z
            h += Z.T @ om @ x[t, :, l]
    np.testing.assert_allclose(phi.reshape(-1, order='F'),
                               np.linalg.solve(prec, h), atol=1e-12)


# ---------------------------------------------------------------------------
# covariances

def test_upsilon_inverse_gamma_hand_computation():
    x = np.array([[[1.0]], [[0.5]], [[-1.0]]])
    x0 = np.array([[2.0]])
    phi = np.array([[0.5]])
    # residuals 1 - 1 = 0, 0.5 - 0.5 = 0, -1 - 0.25 = -1.25
    a = 2.0 + 3 / 2
    b = 1.0 + 0.5 * 1.25 ** 2
    U = pu.sample_upsilon(x, x0, phi, 'diagonal', ZeroNoise(), ig_a=2.0,
                          ig_b=1.0)
    assert abs(U[0, 0] - b / a) < 1e-14


def test_upsilon_zero_residuals_updates_df_only(rng):
    T, N, d = 4, 5, 1
    x = np.zeros((T, N, d))
    draws = np.array([pu.sample_upsilon(x, np.zeros((N, d)), np.eye(d),
                                        'full', rng)[0, 0]
                      for _ in range(20000)])
    # IW_1(df, 1) = IG(df/2, 1/2) with df = d + 2 + TN
    ref = stats.invgamma((d + 2 + T * N) / 2, scale=0.5)
    assert abs(draws.mean() - ref.mean()) < 4 * ref.std() / np.sqrt(20000)


def test_upsilon_draws_spd(rng):
    x = rng.standard_normal((5, 6, 3))
    for s in ('full', 'diagonal'):
        for _ in range(20):
            U = pu.sample_upsilon(x, np.zeros((6, 3)), 0.5 * np.eye(3), s,
                                  rng)
            np.linalg.cholesky(U)
    with pytest.raises(ValueError):
        pu.sample_upsilon(x, np.zeros((6, 3)), np.eye(3), 'bogus', rng)


def test_omega_structures_spd(rng):
    x = rng.standard_normal((5, 4, 2))
    for s in ('full', 'diagonal'):
        om = pu.sample_omega(x, np.zeros((4, 2)), 0.3 * np.eye(4), s, rng)
        np.linalg.cholesky(om)
        np.testing.assert_array_equal(om, om.T)


# ---------------------------------------------------------------------------
# graphical horseshoe

def _hs_chain(S, n, n_iter, rng, burn=500):
    N = S.shape[0]
    om = np.eye(N)
    hs = pu.init_horseshoe(om)
    out = []
    for k in range(n_iter + burn):
        om, hs = pu.sample_omega_horseshoe(S, n, om, hs, rng)
        assert np.all(hs['lam2'] > 0) and hs['tau2'] > 0
        if k >= burn:
            out.append(om.copy())
    return np.array(out)


def _horseshoe_prior_cdf(w):
    """P(W <= w) for an off-diagonal element W ~ N(0, lam^2 tau^2) with
    lam, tau ~ C+(0, 1), integrated numerically over log(lam * tau)."""
    # lam * tau has density 4 log(s) / (pi^2 (s^2 - 1))
    def f_prod(s):
        if abs(s - 1.0) < 1e-8:
            return 2.0 / np.pi ** 2
        return 4.0 * np.log(s) / (np.pi ** 2 * (s * s - 1.0))

    def integrand(u, x):
        s = np.exp(u)
        return stats.norm.cdf(x / s) * f_prod(s) * s

    return np.array([integrate.quad(integrand, -40, 40, args=(x,),
                                    limit=400)[0] for x in w])


def test_horseshoe_two_nodes_grid_oracle(rng):
    n = 6.0
    S = np.array([[4.0, 1.5], [1.5, 3.0]])
    draws = _hs_chain(S, n, 20000, rng)
    # posterior over (w00, w11, w01) on a grid with a flat prior on the
    # diagonal; the off-diagonal prior has a log spike at zero, so each
    # cell carries its exact prior mass rather than a point density
    g00 = np.linspace(1e-3, 10.0, 160)
    g11 = np.linspace(1e-3, 10.0, 160)
    edges = np.linspace(-4.0, 4.0, 402)
    g01 = 0.5 * (edges[1:] + edges[:-1])
    mass01 = np.diff(_horseshoe_prior_cdf(edges))
    A, B, C = np.meshgrid(g00, g11, g01, indexing='ij')
    det = A * B - C * C
    with np.errstate(invalid='ignore', divide='ignore'):
        logp = np.where(det > 0, 0.5 * n * np.log(det), -np.inf) \
            - 0.5 * (S[0, 0] * A + S[1, 1] * B + 2 * S[0, 1] * C) \
            + np.log(mass01)[None, None, :]
    p = np.exp(logp - logp.max())
    p /= p.sum()
    for vals, grid_vals in ((draws[:, 0, 1], C), (draws[:, 0, 0], A),
                            (draws[:, 1, 1], B)):
        m_grid = float((p * grid_vals).sum())
        sd_grid = float(np.sqrt((p * (grid_vals - m_grid) ** 2).sum()))
        bm = vals.reshape(100, -1).mean(1)
        se = bm.std(ddof=1) / 10
        # grid discretisation adds a small bias on top of the MC error
        assert abs(vals.mean() - m_grid) <= 4 * se + 0.01 * sd_grid
        assert abs(vals.std() - sd_grid) <= 0.08 * sd_grid


def test_horseshoe_shrinks_independent_data(rng):
    N, n = 10, 300
    X = rng.standard_normal((n, N)) * np.sqrt(0.5)
    S = X.T @ X
    draws = _hs_chain(S, n, 600, rng, burn=200)
    mean = draws.mean(0)
    off = np.abs(mean[~np.eye(N, dtype=bool)])
    assert off.max() < 0.1 * np.mean(np.diag(mean))
