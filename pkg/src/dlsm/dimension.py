"""Latent-dimension step: smoothed modes, Laplace log-marginals and the
categorical draw of d with the trajectories integrated out."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .latent_sampler import node_scan, sample_initial_state
from .model_core import log_intensity_all

__all__ = ['DimensionLedger', 'smoothed_mode', 'laplace_log_marginal',
           'dimension_probabilities', 'sample_dimension',
           'log_prior_trajectories']

_LOG2PI = np.log(2 * np.pi)


@dataclass
class DimensionLedger:
    """Per-candidate bookkeeping for the dimension step.

    ``entries[d]`` holds the most recent transition/covariance values
    for dimension d (keys 'phi', 'cov', 'hs') together with the latest
    trajectory ('x', 'x0') evaluated under d. ``logml`` holds the most
    recent Laplace values, index d - 1.
    """
    d_max: int
    entries: dict = field(default_factory=dict)
    logml: np.ndarray = None

    def __post_init__(self):
        if self.logml is None:
            self.logml = np.full(self.d_max, np.nan)

    def get(self, d):
        return self.entries[d]

    def put(self, d, **kw):
        self.entries.setdefault(d, {}).update(kw)


def smoothed_mode(x_start, x0_start, W, R, params, config, n_scans=1):
    """Conditional-mean node scan from a starting trajectory.

    Each node's trajectory is replaced by its Gaussian conditional mean
    given the other nodes; afterwards x0 is set to its conditional mean
    given the first slice. Returns (x_hat, x0_hat).
    """
    x = np.array(x_start, dtype=float)
    x0 = np.array(x0_start, dtype=float)
    for _ in range(n_scans):
        node_scan(x, x0, W, R, params, config.parametrization)
        if config.dynamic:
            x0 = sample_initial_state(x[0], params, config.parametrization,
                                      config.x0_mean, config.x0_var, None,
                                      mean_only=True)
    return x, x0


def _mvn_logpdf_rows(res, prec):
    """Sum of log N(res_k | 0, prec^{-1}) over the rows of ``res``."""
    k = prec.shape[0]
    sign, logdet = np.linalg.slogdet(prec)
    if sign <= 0:
        raise FloatingPointError('precision not positive definite')
    quad = np.einsum('nk,kl,nl->', res, prec, res)
    return 0.5 * (res.shape[0] * (logdet - k * _LOG2PI) - quad)


def log_prior_trajectories(x, x0, params, config):
    """log p(x | x0) + log p(x0) under the state-space prior."""
    T, N, d = x.shape
    if not config.dynamic:
        # static: x_i ~ N(0, I_d)
        return float(-0.5 * (x.size * _LOG2PI + np.sum(x * x)))
    lag = np.concatenate([x0[None], x[:-1]], axis=0)
    if config.parametrization == 'nodewise':
        phi = np.atleast_2d(params.phi)
        res = (x - lag @ phi.T).reshape(-1, d)
        lp = _mvn_logpdf_rows(res, np.linalg.inv(np.atleast_2d(params.cov)))
    else:
        res = x - np.einsum('ij,tjk->tik', params.phi, lag)
        # columns x_{:l,t} are the observation vectors
        lp = _mvn_logpdf_rows(res.transpose(0, 2, 1).reshape(-1, N),
                              params.cov)
    r0 = x0 - config.x0_mean
    lp0 = -0.5 * (x0.size * (_LOG2PI + np.log(config.x0_var))
                  + np.sum(r0 * r0) / config.x0_var)
    return float(lp + lp0)


def laplace_log_marginal(x_hat, x0_hat, stats_, alpha, params, config):
    """Laplace-type approximation of log q(y, tau, r | d).

    Pseudo-likelihood at the mode plus the state-space prior at the mode,
    minus (k/2) log Q* where k counts the latent values in the mode
    (d(T+1)N with the initial state, dTN without) and Q* the number of
    active pseudo-observations.
    """
    T, N, d = x_hat.shape
    eta = log_intensity_all(alpha, x_hat)
    terms = {
        'pseudo-likelihood': stats_.loglik(eta),
        'trajectory prior': log_prior_trajectories(x_hat, x0_hat, params,
                                                   config),
    }
    q_star = stats_.total
    slices = T + (1 if config.dynamic and config.laplace_penalty == 'dT1N'
                  else 0)
    if q_star < 1:
        raise FloatingPointError('no active pseudo-observations')
    terms['penalty'] = -0.5 * d * slices * N * np.log(q_star)
    for name, val in terms.items():
        if not np.isfinite(val):
            raise FloatingPointError(f'nonfinite {name} term for d={d}')
    return float(sum(terms.values()))


def dimension_probabilities(logml, prior_weights):
    with np.errstate(divide='ignore'):
        lw = np.asarray(logml, dtype=float) + np.log(prior_weights)
    lse = logsumexp(lw)
    if not np.isfinite(lse):
        raise FloatingPointError('all dimension probabilities vanish')
    return np.exp(lw - lse)


def sample_dimension(logml, prior_weights, rng):
    """Draw d in {1..d_max} with probability proportional to
    exp(logml_d) pi_d."""
    p = dimension_probabilities(logml, prior_weights)
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(p), u * p.sum(), side='right'))
    return min(k, len(p) - 1) + 1
