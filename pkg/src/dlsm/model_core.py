"""Data types, configuration and the intensity / probit mappings.

Dyads are stored in upper-triangular row-major order, i.e. the order of
``np.triu_indices(N, 1)``. Latent trajectories use the layout
``x[t, i, k]`` with shape (T, N, d); the initial state has shape (N, d).
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.special import ndtr

__all__ = [
    'NetworkSeries', 'ModelConfig', 'LatentState', 'GlobalParams',
    'AugmentedState', 'ConfigError', 'log_intensity',
    'zero_inflation_probability', 'dyad_indices', 'dyad_index',
]


class ConfigError(ValueError):
    """Invalid model configuration (carries the offending key)."""

    def __init__(self, key, message):
        super().__init__(f'{key}: {message}')
        self.key = key


def dyad_indices(n_nodes):
    """Row/column indices of the undirected dyads i < j."""
    return np.triu_indices(n_nodes, 1)


def dyad_index(i, j, n_nodes):
    """Position of dyad (i, j), i != j, in the upper-triangular ordering."""
    i, j = (i, j) if i < j else (j, i)
    if i == j or i < 0 or j >= n_nodes:
        raise IndexError(f'invalid dyad ({i}, {j}) for {n_nodes} nodes')
    return i * n_nodes - i * (i + 1) // 2 + (j - i - 1)


@dataclass(frozen=True, eq=False)
class NetworkSeries:
    """T undirected count networks on a common node set.

    Parameters
    ----------
    n_nodes : int
    counts : ndarray of shape (T, N(N-1)/2)
        Nonnegative integer counts for dyads i < j.
    covariates : ndarray of shape (T, N, L), optional
        Node covariates of the zero-inflation layer. Defaults to a
        constant intercept (L = 1).
    """
    n_nodes: int
    counts: np.ndarray
    covariates: Optional[np.ndarray] = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim == 1:
            counts = counts[None, :]
        n_dyads = self.n_nodes * (self.n_nodes - 1) // 2
        if counts.ndim != 2 or counts.shape[1] != n_dyads:
            raise ValueError(
                f'counts must have shape (T, {n_dyads}), got {counts.shape}')
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise ValueError('counts must be finite and nonnegative')
        if np.any(counts != np.round(counts)):
            raise ValueError('counts must be integers')
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)

        cov = self.covariates
        if cov is None:
            cov = np.ones((counts.shape[0], self.n_nodes, 1))
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim != 3 or cov.shape[:2] != (counts.shape[0], self.n_nodes):
            raise ValueError('covariates must have shape (T, N, L)')
        cov.setflags(write=False)
        object.__setattr__(self, 'covariates', cov)

    @property
    def n_times(self):
        return self.counts.shape[0]

    @property
    def n_dyads(self):
        return self.counts.shape[1]

    @property
    def n_covariates(self):
        return self.covariates.shape[2]

    @property
    def dyads(self):
        return dyad_indices(self.n_nodes)

    def adjacency(self, t):
        """Symmetric (N, N) count matrix at time ``t`` (0-based)."""
        Y = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int64)
        I, J = self.dyads
        Y[I, J] = self.counts[t]
        Y[J, I] = self.counts[t]
        return Y

    @classmethod
    def from_adjacency(cls, Y, covariates=None):
        """Build from an array of shape (T, N, N); only i < j is read."""
        Y = np.asarray(Y)
        if Y.ndim == 2:
            Y = Y[None]
        n_nodes = Y.shape[1]
        I, J = dyad_indices(n_nodes)
        return cls(n_nodes, Y[:, I, J], covariates)

    def equals(self, other):
        return (self.n_nodes == other.n_nodes
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.covariates, other.covariates))

    # long-format text ------------------------------------------------------

    def to_csv(self, path=None):
        """Write ``t,i,j,count`` rows (1-based, nonzero counts only)."""
        buf = io.StringIO()
        buf.write(f'# n_nodes={self.n_nodes} n_times={self.n_times}\n')
        buf.write('t,i,j,count\n')
        I, J = self.dyads
        for t in range(self.n_times):
            nz = np.flatnonzero(self.counts[t])
            for p in nz:
                buf.write(f'{t + 1},{I[p] + 1},{J[p] + 1},'
                          f'{self.counts[t, p]}\n')
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, 'w') as fh:
            fh.write(text)
        return path

    @classmethod
    def read_csv(cls, path_or_text, n_nodes=None, n_times=None):
        """Read the long format; omitted dyads are zero.

        The size is taken from the ``# n_nodes=.. n_times=..`` header line
        when present, otherwise from the largest indices seen.
        """
        if '\n' in str(path_or_text):
            lines = str(path_or_text).splitlines()
        else:
            with open(path_or_text) as fh:
                lines = fh.read().splitlines()
        rows = []
        for line in lines:
            if line.startswith('#'):
                for tok in line[1:].split():
                    key, _, val = tok.partition('=')
                    if key == 'n_nodes' and n_nodes is None:
                        n_nodes = int(val)
                    elif key == 'n_times' and n_times is None:
                        n_times = int(val)
                continue
            if line.strip():
                rows.append(line)
        reader = csv.DictReader(rows)
        if reader.fieldnames is None or [
                f.strip() for f in reader.fieldnames] != ['t', 'i', 'j',
                                                           'count']:
            raise ValueError('expected header t,i,j,count')
        recs = [(int(r['t']), int(r['i']), int(r['j']), int(r['count']))
                for r in reader]
        if n_nodes is None:
            n_nodes = max((max(r[1], r[2]) for r in recs), default=0)
        if n_times is None:
            n_times = max((r[0] for r in recs), default=0)
        if n_nodes < 2 or n_times < 1:
            raise ValueError('empty network series')
        counts = np.zeros((n_times, n_nodes * (n_nodes - 1) // 2),
                          dtype=np.int64)
        for t, i, j, c in recs:
            if i == j:
                raise ValueError(f'self-loop at t={t}, node {i}')
            if not (1 <= t <= n_times and 1 <= i <= n_nodes
                    and 1 <= j <= n_nodes):
                raise ValueError(f'index out of range: {(t, i, j)}')
            counts[t - 1, dyad_index(i - 1, j - 1, n_nodes)] = c
        return cls(n_nodes, counts)


# ---------------------------------------------------------------------------
# configuration

_PARAMETRIZATIONS = ('nodewise', 'featurewise')
_UPSILON = ('full', 'diagonal', 'horseshoe')
_PHI = ('full', 'diagonal', 'fixed')


@dataclass
class ModelConfig:
    """Sampler configuration. Flat dotted keys map onto these fields.

    ``d`` is the fixed dimension when ``d_max`` is None; otherwise the
    dimension is random on {1..d_max} with prior ``d_prior``.
    """
    zero_inflated: bool = True
    dynamic: bool = True
    d: int = 2
    d_max: Optional[int] = None
    d_prior: Optional[tuple] = None
    parametrization: str = 'featurewise'
    upsilon_structure: str = 'horseshoe'
    phi_structure: str = 'diagonal'

    sigma_alpha2: float = 5.0
    sigma_beta2: float = 5.0
    x0_mean: float = 0.0
    x0_var: float = 1.0
    phi_mean: float = 0.0
    phi_var: float = 1.0
    iw_df: Optional[float] = None      # default: dim + 2
    iw_scale: float = 1.0              # scale matrix = iw_scale * I
    ig_a: float = 2.0
    ig_b: float = 1.0
    gamma1_var: float = 1.0
    gamma2_a: float = 3.0
    gamma2_b: float = 3.0
    expansions: bool = True
    horseshoe_exponent: str = 'td'     # or 'nd'
    laplace_penalty: str = 'dT1N'      # or 'dTN'
    inactive: str = 'carry'            # or 'prior'
    candidate_start: str = 'mode'      # or 'draw'
    random_scan: bool = False
    init: str = 'spectral'             # or 'prior'

    n_iter: int = 1000
    burn_in: int = 0
    thin: int = 1
    x_thin: int = 1
    store_x: bool = True
    store_w: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_prior is not None:
            self.d_prior = tuple(float(p) for p in self.d_prior)

    @property
    def random_d(self):
        return self.d_max is not None

    @property
    def max_dim(self):
        return self.d_max if self.random_d else self.d

    def prior_weights(self):
        if not self.random_d:
            w = np.zeros(self.d)
            w[-1] = 1.0
            return w
        if self.d_prior is None:
            return np.full(self.d_max, 1.0 / self.d_max)
        return np.asarray(self.d_prior, dtype=float)

    def validate(self, data=None):
        if self.parametrization not in _PARAMETRIZATIONS:
            raise ConfigError('model.parametrization',
                              f'must be one of {_PARAMETRIZATIONS}')
        if self.upsilon_structure not in _UPSILON:
            raise ConfigError('model.upsilon_structure',
                              f'must be one of {_UPSILON}')
        if self.phi_structure not in _PHI:
            raise ConfigError('model.phi_structure',
                              f'must be one of {_PHI}')
        if (self.upsilon_structure == 'horseshoe'
                and self.parametrization != 'featurewise'):
            raise ConfigError('model.upsilon_structure',
                              'horseshoe requires featurewise')
        if self.d < 1:
            raise ConfigError('model.d', 'must be >= 1')
        if self.d_max is not None and self.d_max < 1:
            raise ConfigError('model.d_max', 'must be >= 1')
        if self.random_d:
            w = self.prior_weights()
            if (len(w) != self.d_max or np.any(w < 0)
                    or abs(w.sum() - 1.0) > 1e-8):
                raise ConfigError('prior.d_weights',
                                  'must be d_max nonnegative weights '
                                  'summing to 1')
        if self.horseshoe_exponent not in ('td', 'nd'):
            raise ConfigError('sampler.horseshoe_exponent', "'td' or 'nd'")
        if self.laplace_penalty not in ('dT1N', 'dTN'):
            raise ConfigError('sampler.laplace_penalty', "'dT1N' or 'dTN'")
        if self.init not in ('spectral', 'prior'):
            raise ConfigError('sampler.init', "'spectral' or 'prior'")
        if self.inactive not in ('carry', 'prior'):
            raise ConfigError('sampler.inactive', "'carry' or 'prior'")
        if self.candidate_start not in ('draw', 'mode'):
            raise ConfigError('sampler.candidate_start', "'draw' or 'mode'")
        for key in ('sigma_alpha2', 'sigma_beta2', 'x0_var', 'phi_var',
                    'iw_scale', 'ig_a', 'ig_b', 'gamma1_var', 'gamma2_a',
                    'gamma2_b'):
            if not getattr(self, key) > 0:
                raise ConfigError(_KEYMAP_REV[key], 'must be positive')
        if self.n_iter < 1:
            raise ConfigError('mcmc.n_iter', 'must be >= 1')
        if not (0 <= self.burn_in < self.n_iter):
            raise ConfigError('mcmc.burn_in', 'need 0 <= burn_in < n_iter')
        if self.thin < 1 or self.x_thin < 1:
            raise ConfigError('mcmc.thin', 'must be >= 1')
        if data is not None:
            if self.dynamic and data.n_times < 2:
                raise ConfigError('model.dynamic', 'dynamic model needs T >= 2')
            if not self.dynamic and data.n_times != 1:
                raise ConfigError('model.dynamic', 'static model needs T = 1')
        return self

    # flat key/value form ---------------------------------------------------

    def to_flat(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[_KEYMAP_REV[f.name]] = _format_value(val)
        return out

    @classmethod
    def from_flat(cls, items):
        kwargs = {}
        for key, raw in items.items():
            if key not in _KEYMAP:
                raise ConfigError(key, 'unknown configuration key')
            name = _KEYMAP[key]
            kwargs[name] = _parse_value(name, raw, key)
        return cls(**kwargs)

    def hash(self):
        """Digest of the sampler-relevant configuration.

        Iteration counts are excluded so that a chain can be extended.
        """
        flat = self.to_flat()
        for key in ('mcmc.n_iter',):
            flat.pop(key)
        text = '\n'.join(f'{k}={v}' for k, v in sorted(flat.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **kw):
        return replace(self, **kw)


_KEYMAP_REV = {
    'zero_inflated': 'model.zero_inflated',
    'dynamic': 'model.dynamic',
    'd': 'model.d',
    'd_max': 'model.d_max',
    'd_prior': 'prior.d_weights',
    'parametrization': 'model.parametrization',
    'upsilon_structure': 'model.upsilon_structure',
    'phi_structure': 'model.phi_structure',
    'sigma_alpha2': 'prior.sigma_alpha2',
    'sigma_beta2': 'prior.sigma_beta2',
    'x0_mean': 'prior.x0_mean',
    'x0_var': 'prior.x0_var',
    'phi_mean': 'prior.phi_mean',
    'phi_var': 'prior.phi_var',
    'iw_df': 'prior.iw_df',
    'iw_scale': 'prior.iw_scale',
    'ig_a': 'prior.ig_a',
    'ig_b': 'prior.ig_b',
    'gamma1_var': 'prior.gamma1_var',
    'gamma2_a': 'prior.gamma2_a',
    'gamma2_b': 'prior.gamma2_b',
    'expansions': 'sampler.expansions',
    'horseshoe_exponent': 'sampler.horseshoe_exponent',
    'laplace_penalty': 'sampler.laplace_penalty',
    'inactive': 'sampler.inactive',
    'candidate_start': 'sampler.candidate_start',
    'random_scan': 'sampler.random_scan',
    'init': 'sampler.init',
    'n_iter': 'mcmc.n_iter',
    'burn_in': 'mcmc.burn_in',
    'thin': 'mcmc.thin',
    'x_thin': 'mcmc.x_thin',
    'store_x': 'mcmc.store_x',
    'store_w': 'mcmc.store_w',
    'seed': 'seed',
}
_KEYMAP = {v: k for k, v in _KEYMAP_REV.items()}
_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _format_value(val):
    if val is None:
        return 'none'
    if isinstance(val, bool):
        return 'true' if val else 'false'
    if isinstance(val, tuple):
        return ','.join(repr(float(v)) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def _parse_value(name, raw, key):
    raw = str(raw).strip()
    typ = _TYPES[name]
    try:
        if raw.lower() == 'none':
            if 'Optional' not in str(typ):
                raise ValueError('value required')
            return None
        if typ in ('bool', bool):
            if raw.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(f'not a boolean: {raw!r}')
            return raw.lower() in ('true', '1', 'yes')
        if name == 'd_prior':
            return tuple(float(v) for v in raw.split(','))
        if 'int' in str(typ):
            val = float(raw)
            if val != int(val):
                raise ValueError(f'not an integer: {raw!r}')
            return int(val)
        if 'float' in str(typ):
            return float(raw)
        if name == 'laplace_penalty':
            return {'dt1n': 'dT1N', 'dtn': 'dTN'}.get(raw.lower(), raw)
        return raw.lower()
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


# ---------------------------------------------------------------------------
# state containers

@dataclass
class LatentState:
    """Latent trajectories (T, N, d) and initial state (N, d)."""
    x: np.ndarray
    x0: np.ndarray

    @property
    def d(self):
        return self.x.shape[2]

    def copy(self):
        return LatentState(self.x.copy(), self.x0.copy())


@dataclass
class GlobalParams:
    """Global parameters for the currently active dimension.

    ``phi`` is (d, d) node-wise or (N, N) feature-wise; ``cov`` is the
    node-wise covariance (d, d) or the feature-wise precision (N, N).
    ``hs`` holds graphical-horseshoe locals when used.
    """
    alpha: np.ndarray
    beta: np.ndarray
    phi: np.ndarray
    cov: np.ndarray
    hs: Optional[dict] = None

    def copy(self):
        hs = None if self.hs is None else {k: np.copy(v)
                                           for k, v in self.hs.items()}
        return GlobalParams(self.alpha.copy(), self.beta.copy(),
                            self.phi.copy(), self.cov.copy(), hs)


@dataclass
class AugmentedState:
    """Per dyad-time augmentation arrays, all of shape (T, P).

    ``tau2``/``r2`` are NaN/-1 where y = 0. ``gamma`` holds the latest
    expansion draws: keys 'g1_tilde', 'g1_star' (T,), 'g2_tilde',
    'g2_star' (T,).
    """
    tau1: np.ndarray
    tau2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    w: np.ndarray
    z: np.ndarray
    gamma: dict = field(default_factory=dict)

    def copy(self):
        return AugmentedState(self.tau1.copy(), self.tau2.copy(),
                              self.r1.copy(), self.r2.copy(), self.w.copy(),
                              self.z.copy(),
                              {k: np.copy(v) for k, v in self.gamma.items()})


# ---------------------------------------------------------------------------
# mappings

def log_intensity(alpha, x_t, i, j):
    """alpha_i + alpha_j + <x_i, x_j> for one dyad at one time."""
    n = len(alpha)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f'node index out of range: ({i}, {j})')
    x_t = np.asarray(x_t, dtype=float)
    return float(alpha[i] + alpha[j] + x_t[i] @ x_t[j])


def log_intensity_all(alpha, x):
    """Log intensities for all dyads, shape (T, P)."""
    N = x.shape[1]
    I, J = dyad_indices(N)
    return alpha[I] + alpha[J] + np.einsum('tpk,tpk->tp', x[:, I], x[:, J])


def zero_inflation_probability(beta_i, beta_j, v_i, v_j):
    """P(z > 0) = Phi(beta_i'v_i + beta_j'v_j) under the probit link."""
    beta_i, beta_j = np.atleast_1d(beta_i), np.atleast_1d(beta_j)
    v_i, v_j = np.atleast_1d(v_i), np.atleast_1d(v_j)
    if not (beta_i.shape == v_i.shape == beta_j.shape == v_j.shape):
        raise ValueError('covariate length mismatch')
    return float(ndtr(beta_i @ v_i + beta_j @ v_j))


def utility_mean_all(beta, covariates):
    """beta_i'v_{i,t} + beta_j'v_{j,t} for all dyads, shape (T, P)."""
    N = covariates.shape[1]
    I, J = dyad_indices(N)
    eta = np.einsum('tnl,nl->tn', covariates, beta)
    return eta[:, I] + eta[:, J]
