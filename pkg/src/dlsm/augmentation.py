"""Augmentation layers: inter-arrival times, mixture indicators,
zero-inflation allocations, probit utilities and the two parameter
expansions of the probit block.

All samplers are vectorised over arrays of dyad-times and take a numpy
``Generator``.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.special import expit, log_ndtr, logsumexp, ndtr, ndtri_exp

from .iams_tables import default_bank

__all__ = ['sample_interarrival', 'sample_indicators', 'pseudo_observation',
           'sample_allocation', 'sample_utility', 'truncnorm_std',
           'BetaDesign', 'location_expansion', 'scale_expansion',
           'sample_poisson_layer', 'sample_zero_inflation', 'PseudoStats',
           'IndicatorUnderflowError', 'EmptyTruncationError']


class IndicatorUnderflowError(FloatingPointError):
    pass


class EmptyTruncationError(FloatingPointError):
    pass


def sample_interarrival(y, lam, rng):
    """Draw (tau1, tau2) given counts and intensities.

    tau2 ~ Beta(y, 1) for y > 0 (NaN otherwise) and
    tau1 = 1 + xi - tau2 * 1(y > 0) with xi ~ Exp(lam).
    """
    y = np.asarray(y)
    lam = np.asarray(lam, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise ValueError('intensity must be positive and finite')
    y, lam = np.broadcast_arrays(y, lam)
    xi = rng.standard_exponential(y.shape) / lam
    u = rng.random(y.shape)
    pos = y > 0
    yy = np.where(pos, y, 1)
    # tau2 = U^{1/y}; keep 1 - tau2 accurate for large y
    log_tau2 = np.log(u) / yy
    tau2 = np.where(pos, np.exp(log_tau2), np.nan)
    tau1 = np.where(pos, -np.expm1(log_tau2) + xi, 1.0 + xi)
    if tau1.ndim == 0:
        return float(tau1), (float(tau2) if pos else None)
    return tau1, tau2


def _component_logweights(resid, nu, bank):
    log_c, mu, s2 = bank.params(nu)
    r = np.asarray(resid, dtype=float)[..., None]
    return log_c - 0.5 * np.log(s2) - 0.5 * (r - mu) ** 2 / s2


def indicator_probabilities(tau, log_lambda, nu, bank=None):
    """Normalised component probabilities, shape (..., R)."""
    bank = default_bank() if bank is None else bank
    resid = -np.log(tau) - log_lambda
    lw = _component_logweights(resid, nu, bank)
    lse = logsumexp(lw, axis=-1, keepdims=True)
    if np.any(~np.isfinite(lse)):
        raise IndicatorUnderflowError(
            'all mixture weights underflow: intensity inconsistent with tau')
    return np.exp(lw - lse)


def sample_indicators(tau, log_lambda, nu, rng, bank=None, chunk=1024):
    """Draw r with P(r=k) proportional to c_k N(-log tau - log lam | mu_k, s2_k).

    Entries are processed ``chunk`` at a time to bound the (n, R)
    temporaries; the uniforms are drawn in one call beforehand.
    """
    tau, log_lambda, nu = np.broadcast_arrays(
        np.asarray(tau, dtype=float), np.asarray(log_lambda, dtype=float),
        np.asarray(nu))
    shape = tau.shape
    tau, log_lambda, nu = (a.reshape(-1) for a in (tau, log_lambda, nu))
    u = rng.random(tau.size)
    k = np.empty(tau.size, dtype=np.int64)
    for s in range(0, tau.size, chunk):
        sl = slice(s, s + chunk)
        prob = indicator_probabilities(tau[sl], log_lambda[sl], nu[sl], bank)
        cdf = np.cumsum(prob, axis=-1)
        kk = (u[sl, None] * cdf[:, -1:] >= cdf).sum(-1)
        k[sl] = np.minimum(kk, prob.shape[-1] - 1)
    if not shape:
        return int(k[0])
    return k.reshape(shape)


def pseudo_observation(tau, r, nu, bank=None):
    """Return (-log tau - mu_r, sigma2_r)."""
    bank = default_bank() if bank is None else bank
    _, mu, s2 = bank.component(nu, r)
    return -np.log(tau) - mu, s2


def allocation_probability(lam, log_p, log_1mp):
    """P(w = 1 | y = 0) = p e^{-lam} / ((1 - p) + p e^{-lam})."""
    return expit(log_p - lam - log_1mp)


def sample_allocation(y, lam, p, rng):
    """Draw the zero-inflation allocation w; forced to 1 when y > 0."""
    y = np.asarray(y)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide='ignore'):
        pstar = allocation_probability(np.asarray(lam, dtype=float),
                                       np.log(p), np.log1p(-p))
    u = rng.random(np.broadcast(y, pstar).shape)
    w = (y > 0) | (u < pstar)
    if w.ndim == 0:
        return int(w)
    return w


def sample_utility(w, mu, rng, kappa=None):
    """Draw z | w, mu from N(mu, 1) truncated to the side implied by w.

    Uses the quantile form z = mu + F^{-1}(w + kappa (1 - w - F(mu))),
    evaluated in log space. A draw of kappa = 0 is redrawn.
    """
    w = np.asarray(w, dtype=bool)
    mu = np.asarray(mu, dtype=float)
    w, mu = np.broadcast_arrays(w, mu)
    if kappa is None:
        kappa = rng.random(w.shape)
        bad = kappa <= 0.0
        while np.any(bad):
            kappa[bad] = rng.random(int(bad.sum()))
            bad = kappa <= 0.0
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), w.shape)
    # w = 1: z - mu = -F^{-1}(kappa F(mu));  w = 0: F^{-1}(kappa F(-mu))
    lk = np.log(kappa)
    up = -ndtri_exp(lk + log_ndtr(mu))
    dn = ndtri_exp(lk + log_ndtr(-mu))
    z = mu + np.where(w, up, dn)
    # guard the boundary against rounding
    z = np.where(w, np.maximum(z, np.nextafter(0.0, 1.0)), np.minimum(z, 0.0))
    if z.ndim == 0:
        return float(z)
    return z


def truncnorm_std(a, b, u):
    """Standard normal restricted to [a, b] via inverse CDF in log space."""
    if a > 0:
        return -truncnorm_std(-b, -a, u)
    la, lb = log_ndtr(a), log_ndtr(b)
    if u <= 0:
        lx = la
    elif u >= 1:
        lx = lb
    else:
        lx = np.logaddexp(np.log1p(-u) + la, np.log(u) + lb)
    x = float(ndtri_exp(lx))
    return min(max(x, a), b)


class BetaDesign:
    """Probit design for intercept-plus-covariate utilities.

    The utility of dyad (i, j) at time t is v_{i,t}'beta_i + v_{j,t}'beta_j
    + noise. Holds V'V-type sufficient statistics and the factor of
    M = prior precision + V'V used when beta is integrated out.
    """

    def __init__(self, covariates, sigma_beta2):
        cov = np.asarray(covariates, dtype=float)
        self.covariates = cov
        T, N, L = cov.shape
        self.T, self.N, self.L = T, N, L
        self.I, self.J = np.triu_indices(N, 1)
        self.P = len(self.I)
        NL = N * L
        # sum over dyads of (a_i + a_j)(a_i + a_j)' with a_i = e_i (x) v_i
        M = np.eye(NL) / sigma_beta2
        for t in range(T):
            vt = cov[t]
            blk = np.einsum('nl,nm->nlm', vt, vt)
            for i in range(N):
                M[i * L:(i + 1) * L, i * L:(i + 1) * L] += (N - 2) * blk[i]
            s = vt.reshape(-1)
            M += np.outer(s, s)
        self.M = M
        self.M_chol = linalg.cho_factor(M, lower=True)
        # A'V: row t is sum over dyads of (a_i + a_j)'
        self.AV = (N - 1) * cov.reshape(T, NL)
        self.MinvVA = linalg.cho_solve(self.M_chol, self.AV.T)  # (NL, T)

    def Vt_dot(self, z):
        """V'z for z of shape (T, P); returns (N*L,)."""
        out = np.zeros((self.N, self.L))
        for t in range(self.T):
            s = (np.bincount(self.I, z[t], minlength=self.N)
                 + np.bincount(self.J, z[t], minlength=self.N))
            out += s[:, None] * self.covariates[t]
        return out.reshape(-1)

    def mean_utility(self, beta):
        eta = np.einsum('tnl,nl->tn', self.covariates, beta)
        return eta[:, self.I] + eta[:, self.J]

    def sample_beta(self, z, rng):
        """Joint draw beta | z ~ N(M^{-1} V'z, M^{-1}), shape (N, L)."""
        b = self.Vt_dot(z)
        mean = linalg.cho_solve(self.M_chol, b)
        L = self.M_chol[0]
        eps = rng.standard_normal(len(b))
        draw = mean + linalg.solve_triangular(L, eps, lower=True, trans='T')
        return draw.reshape(self.N, self.L)

    def gamma_system(self, zt, gamma1_var):
        """Precision and linear term of the per-time shifts, beta integrated."""
        T, P = self.T, self.P
        prec = (1.0 / gamma1_var + P) * np.eye(T) - self.AV @ self.MinvVA
        h = zt.sum(1) - self.MinvVA.T @ self.Vt_dot(zt)
        return prec, h

    def scale_quadratic(self, zt):
        """z'(I + V S V')^{-1} z via Woodbury."""
        b = self.Vt_dot(zt)
        return float((zt * zt).sum() - b @ linalg.cho_solve(self.M_chol, b))


def location_expansion(z, w, design, gamma1_var, rng, gamma_tilde=None):
    """Location expansion of the utilities, one shift per time slice.

    Draws gamma_tilde_t ~ N(0, G), shifts z, then updates the shifts one
    slice at a time from their Gaussian conditional (beta integrated out)
    truncated to [max_{w=0} z~, min_{w=1} z~], and returns the re-centred
    utilities z~ - gamma_star.
    """
    T = z.shape[0]
    if gamma_tilde is None:
        gamma_tilde = rng.normal(0.0, np.sqrt(gamma1_var), T)
    zt = z + gamma_tilde[:, None]
    prec, h = design.gamma_system(zt, gamma1_var)
    g = np.array(gamma_tilde, dtype=float)
    lo = np.where((~w).any(1), np.where(~w, zt, -np.inf).max(1), -np.inf)
    hi = np.where(w.any(1), np.where(w, zt, np.inf).min(1), np.inf)
    if np.any(lo > hi):
        t = int(np.argmax(lo > hi))
        raise EmptyTruncationError(f'empty truncation interval at t={t}')
    for t in range(T):
        ptt = prec[t, t]
        m = (h[t] - prec[t] @ g + ptt * g[t]) / ptt
        sd = 1.0 / np.sqrt(ptt)
        u = rng.random()
        g[t] = m + sd * truncnorm_std((lo[t] - m) / sd, (hi[t] - m) / sd, u)
        g[t] = min(max(g[t], lo[t]), hi[t])
    znew = zt - g[:, None]
    # a shift landing exactly on a bound would put a utility on zero
    znew = np.where(w, np.maximum(znew, np.nextafter(0.0, 1.0)),
                    np.minimum(znew, 0.0))
    return znew, gamma_tilde, g


def scale_expansion(z, design, a, b, rng):
    """Scale expansion shared by all slices.

    gamma_tilde ~ IG(a, b); gamma_star ~ IG(a + n/2, b + q/2) with
    q = gamma_tilde * z'(I + V S V')^{-1} z; returns
    sqrt(gamma_tilde / gamma_star) * z.
    """
    n = z.size
    g_tilde = b / rng.gamma(a)
    q = g_tilde * design.scale_quadratic(z)
    a_post = a + n / 2.0
    b_post = b + q / 2.0
    g_star = b_post / rng.gamma(a_post)
    return np.sqrt(g_tilde / g_star) * z, g_tilde, g_star, a_post, b_post


# ---------------------------------------------------------------------------
# sweep-level helpers

def sample_poisson_layer(counts, log_lam, rng, bank=None):
    """Refresh (tau1, tau2, r1, r2) for every dyad-time.

    Dyads currently allocated to the Dirac component receive draws from
    the same y = 0 conditional; they carry no pseudo-observations until
    allocated to the Poisson component.
    """
    bank = default_bank() if bank is None else bank
    counts = np.asarray(counts)
    # w = 0 dyads leave log_lam unconstrained; cap to keep exp finite
    tau1, tau2 = sample_interarrival(counts, np.exp(np.minimum(log_lam, 700.0)),
                                     rng)
    r1 = sample_indicators(tau1, log_lam, np.ones_like(counts), rng, bank)
    r2 = np.full(counts.shape, -1, dtype=np.int64)
    pos = counts > 0
    if np.any(pos):
        r2[pos] = sample_indicators(tau2[pos], log_lam[pos], counts[pos], rng,
                                    bank)
    return tau1, tau2, np.asarray(r1, dtype=np.int64), r2


def sample_zero_inflation(counts, log_lam, z, beta, design, rng, *,
                          expansions=True, gamma1_var=1.0, gamma2_a=3.0,
                          gamma2_b=3.0):
    """One pass of the probit block: w, z (with expansions), then beta.

    w is drawn with z integrated out, z given w and beta, the two
    expansions move z with beta integrated out, and beta is finally
    drawn jointly given the moved z. Returns (w, z, beta, gamma).
    """
    mu = design.mean_utility(beta)
    p = ndtr(mu)
    w = sample_allocation(counts, np.exp(log_lam), p, rng).astype(bool)
    z = sample_utility(w, mu, rng)
    gamma = {}
    if expansions:
        z, g1t, g1s = location_expansion(z, w, design, gamma1_var, rng)
        z, g2t, g2s, _, _ = scale_expansion(z, design, gamma2_a, gamma2_b,
                                            rng)
        gamma = {'g1_tilde': g1t, 'g1_star': g1s,
                 'g2_tilde': np.array([g2t]), 'g2_star': np.array([g2s])}
    beta = design.sample_beta(z, rng)
    return w, z, beta, gamma


class PseudoStats:
    """Per dyad-time sums over the active pseudo-observations.

    With pseudo-values v_k and variances s_k of dyad-time (i, j, t):
    ``prec`` = sum 1/s_k, ``vsum`` = sum v_k/s_k, ``q2`` = sum v_k^2/s_k,
    ``logvar`` = sum log s_k and ``nobs`` the number of terms. Only dyads
    with w = 1 contribute.
    """

    def __init__(self, counts, aug, bank=None):
        bank = default_bank() if bank is None else bank
        counts = np.asarray(counts)
        w = np.asarray(aug.w, dtype=bool)
        v1, s1 = pseudo_observation(aug.tau1, aug.r1, np.ones_like(counts),
                                    bank)
        pos = (counts > 0) & w
        v2 = np.zeros(counts.shape)
        s2 = np.ones(counts.shape)
        if np.any(pos):
            v2[pos], s2[pos] = pseudo_observation(aug.tau2[pos], aug.r2[pos],
                                                  counts[pos], bank)
        wf = w.astype(float)
        pf = pos.astype(float)
        self.prec = wf / s1 + pf / s2
        self.vsum = wf * v1 / s1 + pf * v2 / s2
        self.q2 = wf * v1 * v1 / s1 + pf * v2 * v2 / s2
        self.logvar = wf * np.log(s1) + pf * np.log(s2)
        self.nobs = w.astype(np.int64) + pos
        self.n_nodes = int(round((1 + np.sqrt(1 + 8 * counts.shape[1])) / 2))

    @property
    def total(self):
        """Total number of active pseudo-observations."""
        return int(self.nobs.sum())

    def loglik(self, eta):
        """Sum of Gaussian log densities of the pseudo-observations."""
        quad = self.q2 - 2.0 * eta * self.vsum + eta * eta * self.prec
        return float(-0.5 * (self.nobs.sum() * np.log(2 * np.pi)
                             + self.logvar.sum() + quad.sum()))

    def node_arrays(self, alpha):
        """Symmetric (T, N, N) precision sums and offset-free residual sums.

        ``R[t, i, j] = vsum - prec * (alpha_i + alpha_j)`` so that the
        likelihood of node i at time t has precision sum_j W x_j x_j' and
        linear term sum_j R x_j.
        """
        T, P = self.prec.shape
        N = self.n_nodes
        I, J = np.triu_indices(N, 1)
        W = np.zeros((T, N, N))
        R = np.zeros((T, N, N))
        W[:, I, J] = self.prec
        W[:, J, I] = self.prec
        res = self.vsum - self.prec * (alpha[I] + alpha[J])
        R[:, I, J] = res
        R[:, J, I] = res
        return W, R
