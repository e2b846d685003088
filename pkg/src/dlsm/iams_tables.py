"""Gaussian-mixture approximations of the negative log-gamma density.

For integer shape nu the density of eps = -log(G), G ~ Gamma(nu, 1), is

    p(eps | nu) = exp(-nu * eps - exp(-eps)) / Gamma(nu)

with mean -digamma(nu) and variance trigamma(nu). Mixtures are fitted by
weighted EM on a fine grid followed by direct minimisation of the
discretised KL divergence, and certified by adaptive quadrature.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special, stats

__all__ = ['MixtureComponents', 'MixtureFitError', 'fit_mixture', 'lookup',
           'component_schedule', 'log_density', 'kl_divergence',
           'MixtureBank', 'NU_TAB', 'write_cache', 'read_cache']

NU_TAB = 100
DEFAULT_TOL = 1e-3
_CACHE_FILE = os.path.join(os.path.dirname(__file__), 'data',
                           'iams_tables.csv')


class MixtureFitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MixtureComponents:
    nu: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def R(self):
        return len(self.weights)

    def mean(self):
        return float(self.weights @ self.means)

    def var(self):
        m = self.mean()
        return float(self.weights @ (self.variances + self.means ** 2) - m * m)

    def logpdf(self, eps):
        eps = np.asarray(eps, dtype=float)[..., None]
        lp = (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.variances)
              - 0.5 * (eps - self.means) ** 2 / self.variances)
        return special.logsumexp(lp, axis=-1)

    def cdf(self, eps):
        eps = np.asarray(eps, dtype=float)[..., None]
        return (self.weights * special.ndtr(
            (eps - self.means) / np.sqrt(self.variances))).sum(-1)


def component_schedule(nu):
    if nu <= 4:
        return 10
    if nu <= 19:
        return 6
    if nu <= NU_TAB:
        return 3
    return 1


def log_density(eps, nu):
    eps = np.asarray(eps, dtype=float)
    return -nu * eps - np.exp(-eps) - special.gammaln(nu)


def exact_moments(nu):
    return -special.digamma(nu), special.polygamma(1, nu)


def exact_quantile(q, nu):
    # P(G > g) = q  <=>  P(eps < -log g) = q
    return -np.log(special.gammainccinv(nu, q))


def kl_divergence(mix, nu=None):
    """KL(exact || mix) by adaptive quadrature on quantile-split pieces."""
    nu = mix.nu if nu is None else nu

    def integrand(e):
        lp = log_density(e, nu)
        return np.exp(lp) * (lp - mix.logpdf(e))

    qs = [1e-15, 1e-9, 1e-5, 1e-3, 0.05, 0.25, 0.5, 0.75, 0.95, 0.999,
          1 - 1e-5, 1 - 1e-9, 1 - 1e-15]
    knots = [exact_quantile(q, nu) for q in qs]
    total = 0.0
    pieces = [(-np.inf, knots[0])] + list(zip(knots[:-1], knots[1:])) + [
        (knots[-1], np.inf)]
    for a, b in pieces:
        val, _ = integrate.quad(integrand, a, b, limit=200, epsabs=1e-13,
                                epsrel=1e-10)
        total += val
    return max(total, 0.0)


def _grid(nu, n=6000):
    lo = exact_quantile(1e-13, nu)
    hi = exact_quantile(1 - 1e-13, nu)
    e = np.linspace(lo, hi, n)
    p = np.exp(log_density(e, nu))
    w = p / p.sum()
    return e, w


def _em(e, w, c, mu, s2, n_iter, rtol=1e-12):
    prev = -np.inf
    for _ in range(n_iter):
        lp = (np.log(c) - 0.5 * np.log(2 * np.pi * s2)
              - 0.5 * (e[:, None] - mu) ** 2 / s2)
        mx = lp.max(1, keepdims=True)
        dens = np.exp(lp - mx)
        tot = dens.sum(1, keepdims=True)
        ll = float(w @ (np.log(tot[:, 0]) + mx[:, 0]))
        if ll - prev < rtol * max(1.0, abs(ll)):
            break
        prev = ll
        resp = dens / tot * w[:, None]
        nk = resp.sum(0) + 1e-300
        c = nk / nk.sum()
        mu = (resp * e[:, None]).sum(0) / nk
        s2 = (resp * (e[:, None] - mu) ** 2).sum(0) / nk
        s2 = np.maximum(s2, 1e-8)
    return c, mu, s2


def _unpack(theta, R):
    a = np.concatenate([[0.0], theta[:R - 1]])
    c = np.exp(a - special.logsumexp(a))
    mu = theta[R - 1:2 * R - 1]
    s2 = np.exp(theta[2 * R - 1:])
    return c, mu, s2


def _discrete_kl(theta, R, e, w, lp_exact):
    c, mu, s2 = _unpack(theta, R)
    lq = special.logsumexp(np.log(c) - 0.5 * np.log(2 * np.pi * s2)
                           - 0.5 * (e[:, None] - mu) ** 2 / s2, axis=1)
    return float(w @ (lp_exact - lq))


def fit_mixture(nu, R=None, tol=DEFAULT_TOL, max_em=3000, max_opt=4000):
    """Fit an R-component Gaussian mixture to p(eps | nu).

    Raises
    ------
    MixtureFitError
        If the certified KL exceeds ``tol`` or the moments are off by
        more than 1e-2 after the iteration budget.
    """
    nu = int(nu)
    if nu < 1:
        raise ValueError('nu must be >= 1')
    R = component_schedule(nu) if R is None else int(R)
    if R < 1:
        raise ValueError('R must be >= 1')
    m, v = exact_moments(nu)
    if R == 1:
        mix = MixtureComponents(nu, np.ones(1), np.array([m]), np.array([v]))
    else:
        e, w = _grid(nu)
        lp_exact = log_density(e, nu) - np.log(
            np.exp(log_density(e, nu)).sum() * (e[1] - e[0]))
        # spread initial means over central quantiles
        q = (np.arange(R) + 0.5) / R
        mu0 = np.array([exact_quantile(qq, nu) for qq in q])
        c0 = np.full(R, 1.0 / R)
        s20 = np.full(R, v / R)
        c, mu, s2 = _em(e, w, c0, mu0, s20, max_em)
        theta0 = np.concatenate([np.log(c[1:] / c[0]), mu, np.log(s2)])
        res = optimize.minimize(_discrete_kl, theta0,
                                args=(R, e, w, lp_exact), method='L-BFGS-B',
                                options={'maxiter': max_opt, 'ftol': 1e-13,
                                         'gtol': 1e-10})
        c, mu, s2 = _unpack(res.x, R)
        order = np.argsort(mu)
        mix = MixtureComponents(nu, c[order] / c.sum(), mu[order], s2[order])
    kl = kl_divergence(mix)
    if not kl <= tol:
        raise MixtureFitError(
            f'nu={nu}, R={R}: KL {kl:.3g} exceeds tolerance {tol:.3g}')
    if abs(mix.mean() - m) > 1e-2 or abs(mix.var() - v) > 1e-2:
        raise MixtureFitError(f'nu={nu}, R={R}: moment mismatch')
    return mix


def asymptotic(nu):
    m, v = exact_moments(nu)
    return MixtureComponents(int(nu), np.ones(1), np.array([m]),
                             np.array([v]))


# ---------------------------------------------------------------------------
# cache

def _checksum(rows):
    return hashlib.sha256('\n'.join(rows).encode()).hexdigest()


def write_cache(tables, path=_CACHE_FILE):
    rows = []
    for nu in sorted(tables):
        mix = tables[nu]
        for k in range(mix.R):
            rows.append(f'{nu},{k},{float(mix.weights[k])!r},'
                        f'{float(mix.means[k])!r},'
                        f'{float(mix.variances[k])!r}')
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w') as fh:
        fh.write('nu,k,c,mu,sigma2\n')
        fh.write('\n'.join(rows) + '\n')
        fh.write(f'# sha256={_checksum(rows)}\n')
    return path


def read_cache(path=_CACHE_FILE):
    """Parse a cache file; returns None when absent or corrupt."""
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != 'nu,k,c,mu,sigma2':
        return None
    rows = [ln for ln in lines[1:] if ln and not ln.startswith('#')]
    check = [ln for ln in lines if ln.startswith('# sha256=')]
    if not check or check[0].split('=', 1)[1] != _checksum(rows):
        return None
    acc = {}
    for ln in rows:
        nu, k, c, mu, s2 = ln.split(',')
        acc.setdefault(int(nu), []).append((int(k), float(c), float(mu),
                                            float(s2)))
    tables = {}
    for nu, comps in acc.items():
        comps.sort()
        arr = np.array([x[1:] for x in comps])
        tables[nu] = MixtureComponents(nu, arr[:, 0], arr[:, 1], arr[:, 2])
    return tables


def build_tables(nu_tab=NU_TAB, tol=DEFAULT_TOL):
    return {nu: fit_mixture(nu, tol=tol) for nu in range(1, nu_tab + 1)}


@lru_cache(maxsize=1)
def _tables():
    tables = read_cache()
    if tables is None or set(tables) != set(range(1, NU_TAB + 1)):
        tables = build_tables()
    return tables


def lookup(nu):
    """Mixture for shape ``nu``: tabulated up to NU_TAB, Gaussian beyond."""
    nu = int(nu)
    if nu < 1:
        raise ValueError('nu must be >= 1')
    if nu > NU_TAB:
        return asymptotic(nu)
    return _tables()[nu]


# ---------------------------------------------------------------------------
# vectorised access

class MixtureBank:
    """Padded arrays of all tabulated mixtures for vectorised sampling.

    Row ``nu`` (1..NU_TAB) holds that mixture; shapes above NU_TAB use a
    single moment-matched component computed on the fly.
    """

    def __init__(self):
        tables = {nu: lookup(nu) for nu in range(1, NU_TAB + 1)}
        self.R = max(m.R for m in tables.values())
        shape = (NU_TAB + 1, self.R)
        self.log_c = np.full(shape, -np.inf)
        self.mu = np.zeros(shape)
        self.s2 = np.ones(shape)
        for nu, m in tables.items():
            self.log_c[nu, :m.R] = np.log(m.weights)
            self.mu[nu, :m.R] = m.means
            self.s2[nu, :m.R] = m.variances

    def params(self, nu):
        """(log_c, mu, s2) arrays of shape nu.shape + (R,)."""
        nu = np.asarray(nu, dtype=np.int64)
        big = nu > NU_TAB
        idx = np.where(big, 0, nu)
        log_c = np.array(self.log_c[idx])
        mu = np.array(self.mu[idx])
        s2 = np.array(self.s2[idx])
        if np.any(big):
            nb = nu[big].astype(float)
            lc = np.full((nb.size, self.R), -np.inf)
            lc[:, 0] = 0.0
            m = np.zeros((nb.size, self.R))
            m[:, 0] = -special.digamma(nb)
            s = np.ones((nb.size, self.R))
            s[:, 0] = special.polygamma(1, nb)
            log_c[big], mu[big], s2[big] = lc, m, s
        return log_c, mu, s2

    def component(self, nu, r):
        """(log_c, mu, s2) of component r for each entry."""
        nu = np.asarray(nu, dtype=np.int64)
        r = np.asarray(r, dtype=np.int64)
        big = nu > NU_TAB
        idx = np.where(big, 0, nu)
        log_c = np.array(self.log_c[idx, r])
        mu = np.array(self.mu[idx, r])
        s2 = np.array(self.s2[idx, r])
        if np.any(big):
            nb = nu[big].astype(float)
            log_c[big] = 0.0
            mu[big] = -special.digamma(nb)
            s2[big] = special.polygamma(1, nb)
        return log_c, mu, s2


@lru_cache(maxsize=1)
def default_bank():
    return MixtureBank()


if __name__ == '__main__':  # regenerate the packaged cache
    print(write_cache(build_tables()))
