"""Conjugate full-conditional draws for the global parameters.

Covers the intercepts, the node-wise probit coefficients, the transition
matrices of both parametrisations (full, diagonal or held fixed), the
node-wise state covariance (inverse Wishart or diagonal inverse gamma)
and the feature-wise precision (Wishart, diagonal gamma or graphical
horseshoe).
"""
from __future__ import annotations

import numpy as np
from scipy import linalg, stats

__all__ = ['alpha_system', 'sample_alpha', 'sample_beta',
           'transition_residuals', 'sample_phi', 'sample_phi_tilde',
           'sample_upsilon', 'sample_omega', 'sample_omega_horseshoe',
           'init_horseshoe']


def _gauss_canonical(prec, h, rng):
    """Draw from N(prec^{-1} h, prec^{-1})."""
    L = np.linalg.cholesky(prec)
    mean = linalg.cho_solve((L, True), h)
    eps = rng.standard_normal(h.shape)
    return mean + linalg.solve_triangular(L, eps, lower=True, trans='T')


def _inner(x):
    N = x.shape[1]
    I, J = np.triu_indices(N, 1)
    return np.einsum('tpk,tpk->tp', x[:, I], x[:, J])


# ---------------------------------------------------------------------------
# intercepts

def alpha_system(stats_, x, sigma_alpha2):
    """Posterior precision and linear term of the intercept vector.

    Each active pseudo-observation of dyad (i, j) adds the design row
    e_i + e_j with residual (pseudo-value - x_i'x_j).
    """
    T, N, _ = x.shape
    I, J = np.triu_indices(N, 1)
    prec_d = stats_.prec.sum(0)
    res = (stats_.vsum - stats_.prec * _inner(x)).sum(0)
    P = np.eye(N) / sigma_alpha2
    P[I, J] += prec_d
    P[J, I] += prec_d
    P[np.diag_indices(N)] += (np.bincount(I, prec_d, minlength=N)
                              + np.bincount(J, prec_d, minlength=N))
    h = np.bincount(I, res, minlength=N) + np.bincount(J, res, minlength=N)
    return P, h


def sample_alpha(stats_, x, sigma_alpha2, rng):
    """Joint draw of all intercepts."""
    P, h = alpha_system(stats_, x, sigma_alpha2)
    return _gauss_canonical(P, h, rng)


# ---------------------------------------------------------------------------
# probit coefficients

def sample_beta(i, z, beta, covariates, sigma_beta2, rng):
    """Draw beta_i given all other beta_j and the utilities.

    Uses the partial residuals z_{ij,t} - beta_j'v_{j,t} of every dyad
    containing i, regressed on v_{i,t}.
    """
    T, N, L = covariates.shape
    I, J = np.triu_indices(N, 1)
    sel = np.flatnonzero((I == i) | (J == i))
    other = np.where(I[sel] == i, J[sel], I[sel])
    eta_o = np.einsum('tpl,pl->tp', covariates[:, other], beta[other])
    resid = z[:, sel] - eta_o
    vi = covariates[:, i]                      # (T, L)
    prec = np.eye(L) / sigma_beta2 + (N - 1) * vi.T @ vi
    h = vi.T @ resid.sum(1)
    return _gauss_canonical(prec, h, rng)


# ---------------------------------------------------------------------------
# transitions

def _lagged(x, x0):
    return np.concatenate([x0[None], x[:-1]], axis=0)


def transition_residuals(x, x0, phi, parametrization):
    """x_t minus its one-step prediction, shape (T, N, d)."""
    lag = _lagged(x, x0)
    if parametrization == 'nodewise':
        return x - lag @ np.atleast_2d(phi).T
    return x - np.einsum('ij,tjk->tik', phi, lag)


def sample_phi(x, x0, upsilon, structure, phi_mean, phi_var, rng,
               phi=None):
    """Node-wise transition Phi (d x d): x_{i,t} ~ N(Phi x_{i,t-1}, U).

    ``structure`` is 'full', 'diagonal' or 'fixed' (returns ``phi``).
    """
    if structure == 'fixed':
        return np.array(phi, dtype=float)
    d = x.shape[2]
    Q = np.linalg.inv(np.atleast_2d(upsilon))
    lag = _lagged(x, x0).reshape(-1, d)
    cur = x.reshape(-1, d)
    Sxx = lag.T @ lag
    Syx = cur.T @ lag
    if structure == 'full':
        # vec(Phi) column-stacked: prediction = (x' kron I) vec(Phi)
        prec = np.eye(d * d) / phi_var + np.kron(Sxx, Q)
        h = phi_mean / phi_var + (Q @ Syx).reshape(-1, order='F')
        v = _gauss_canonical(prec, h, rng)
        return v.reshape(d, d, order='F')
    if structure == 'diagonal':
        prec = np.eye(d) / phi_var + Q * Sxx
        h = phi_mean / phi_var + np.diag(Q @ Syx)
        return np.diag(_gauss_canonical(prec, h, rng))
    raise ValueError(f'unknown phi structure {structure!r}')


def sample_phi_tilde(x, x0, omega, structure, phi_mean, phi_var, rng,
                     phi=None):
    """Feature-wise transition (N x N):
    x_{:l,t} ~ N(Phi~ x_{:l,t-1}, Omega~^{-1})."""
    if structure == 'fixed':
        return np.array(phi, dtype=float)
    N = x.shape[1]
    lag = _lagged(x, x0)
    Sxx = np.einsum('tik,tjk->ij', lag, lag)
    Syx = np.einsum('tik,tjk->ij', x, lag)
    if structure == 'full':
        prec = np.eye(N * N) / phi_var + np.kron(Sxx, omega)
        h = phi_mean / phi_var + (omega @ Syx).reshape(-1, order='F')
        v = _gauss_canonical(prec, h, rng)
        return v.reshape(N, N, order='F')
    if structure == 'diagonal':
        prec = np.eye(N) / phi_var + omega * Sxx
        h = phi_mean / phi_var + np.diag(omega @ Syx)
        return np.diag(_gauss_canonical(prec, h, rng))
    raise ValueError(f'unknown phi structure {structure!r}')


# ---------------------------------------------------------------------------
# state covariance / precision

def sample_upsilon(x, x0, phi, structure, rng, iw_df=None, iw_scale=1.0,
                   ig_a=2.0, ig_b=1.0):
    """Node-wise covariance: IW(df + TN, scale I + S) or per-coordinate
    IG(a + TN/2, b + S_kk/2) with S the residual scatter."""
    T, N, d = x.shape
    res = transition_residuals(x, x0, phi, 'nodewise').reshape(-1, d)
    S = res.T @ res
    if structure == 'full':
        df = (d + 2 if iw_df is None else iw_df) + T * N
        scale = iw_scale * np.eye(d) + S
        return np.atleast_2d(stats.invwishart.rvs(df, scale,
                                                  random_state=rng))
    if structure == 'diagonal':
        a = ig_a + T * N / 2.0
        b = ig_b + 0.5 * np.diag(S)
        return np.diag(b / rng.gamma(a, size=d))
    raise ValueError(f'unknown upsilon structure {structure!r}')


def residual_scatter(x, x0, phi_t):
    """S = sum over times and features of residual outer products (N x N)."""
    res = transition_residuals(x, x0, phi_t, 'featurewise')
    return np.einsum('tik,tjk->ij', res, res)


def sample_omega(x, x0, phi_t, structure, rng, iw_df=None, iw_scale=1.0,
                 ig_a=2.0, ig_b=1.0):
    """Feature-wise precision for the 'full' (Wishart) and 'diagonal'
    (gamma) structures. The covariance Omega~^{-1} has the same IW/IG
    prior as the node-wise case with n = Td observation vectors."""
    T, N, d = x.shape
    S = residual_scatter(x, x0, phi_t)
    n = T * d
    if structure == 'full':
        df = (N + 2 if iw_df is None else iw_df) + n
        scale = iw_scale * np.eye(N) + S
        cov = np.atleast_2d(stats.invwishart.rvs(df, scale,
                                                 random_state=rng))
        prec = np.linalg.inv(cov)
        return 0.5 * (prec + prec.T)
    if structure == 'diagonal':
        a = ig_a + n / 2.0
        b = ig_b + 0.5 * np.diag(S)
        return np.diag(rng.gamma(a, size=N) / b)
    raise ValueError(f'unknown omega structure {structure!r}')


# ---------------------------------------------------------------------------
# graphical horseshoe

def init_horseshoe(omega):
    N = omega.shape[0]
    return {'lam2': np.ones((N, N)), 'nu': np.ones((N, N)),
            'tau2': np.array(1.0), 'xi': np.array(1.0),
            'sigma': np.linalg.inv(omega)}


def sample_omega_horseshoe(S, n, omega, hs, rng):
    """One column sweep of the graphical-horseshoe sampler.

    Parameters
    ----------
    S : ndarray (N, N)
        Residual scatter matrix.
    n : float
        Number of observation vectors behind ``S`` (the determinant
        exponent is n/2).
    omega : ndarray (N, N)
        Current precision; not modified.
    hs : dict
        Locals ``lam2``, ``nu`` (N x N), globals ``tau2``, ``xi`` and the
        cached inverse ``sigma``.

    Returns
    -------
    omega, hs
        Updated copies. Diagonal entries have a flat prior.
    """
    N = omega.shape[0]
    omega = omega.copy()
    lam2 = hs['lam2'].copy()
    nu = hs['nu'].copy()
    tau2 = float(hs['tau2'])
    xi = float(hs['xi'])
    sigma = hs['sigma'].copy()
    for i in range(N):
        ind = np.r_[0:i, i + 1:N]
        s22 = S[i, i]
        sig12 = sigma[ind, i]
        inv11 = sigma[np.ix_(ind, ind)] - np.outer(sig12, sig12) / sigma[i, i]
        inv11 = 0.5 * (inv11 + inv11.T)
        C = s22 * inv11 + np.diag(1.0 / (lam2[ind, i] * tau2))
        try:
            Lc = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                f'horseshoe column {i}: conditional precision not PD') \
                from None
        mean = -linalg.cho_solve((Lc, True), S[ind, i])
        beta = mean + linalg.solve_triangular(
            Lc, rng.standard_normal(N - 1), lower=True, trans='T')
        gam = rng.gamma(n / 2.0 + 1.0, 2.0 / s22)
        ib = inv11 @ beta
        omega[ind, i] = beta
        omega[i, ind] = beta
        omega[i, i] = gam + beta @ ib
        rate = beta * beta / (2.0 * tau2) + 1.0 / nu[ind, i]
        l2 = rate / rng.standard_exponential(N - 1)
        nn = (1.0 + 1.0 / l2) / rng.standard_exponential(N - 1)
        lam2[ind, i] = l2
        lam2[i, ind] = l2
        nu[ind, i] = nn
        nu[i, ind] = nn
        sigma[np.ix_(ind, ind)] = inv11 + np.outer(ib, ib) / gam
        sigma[ind, i] = -ib / gam
        sigma[i, ind] = -ib / gam
        sigma[i, i] = 1.0 / gam
    iu = np.triu_indices(N, 1)
    K = len(iu[0])
    if K:
        rate = 1.0 / xi + np.sum(omega[iu] ** 2 / (2.0 * lam2[iu]))
        tau2 = rate / rng.gamma((K + 1) / 2.0)
        xi = (1.0 + 1.0 / tau2) / rng.standard_exponential()
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError('horseshoe sweep left Omega not PD') \
            from None
    return omega, {'lam2': lam2, 'nu': nu, 'tau2': np.array(tau2),
                   'xi': np.array(xi), 'sigma': sigma}
