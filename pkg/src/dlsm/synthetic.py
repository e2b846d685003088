"""Synthetic zero-inflated Poisson network series with known truth.

Latent features follow x_{:l,t} = phi x_{:l,t-1} + e_t with block
equicorrelated innovations shared across features, intercepts and
probit coefficients are Gaussian across nodes, and structural zeros
come from a probit layer z ~ N(beta_i + beta_j, 1).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from .model_core import NetworkSeries, dyad_indices, log_intensity_all

__all__ = ['DGPSpec', 'GroundTruth', 'generate', 'default_blocks',
           'block_covariance', 'beta_mean_for_zero_share',
           'score_against_truth', 'f1_mcc']

REFERENCE_BLOCKS = (5, 5, 5, 10, 10, 5, 10)


def default_blocks(n_nodes):
    """Reference partition rescaled to ``n_nodes`` (largest remainder)."""
    ref = np.array(REFERENCE_BLOCKS, dtype=float)
    raw = ref * n_nodes / ref.sum()
    out = np.floor(raw).astype(int)
    rem = n_nodes - out.sum()
    order = np.argsort(-(raw - out), kind='stable')
    out[order[:rem]] += 1
    return tuple(int(b) for b in out if b > 0)


def block_covariance(blocks, var=0.8, cov=0.5):
    """blkdiag of (var - cov) I + cov 11'."""
    N = int(sum(blocks))
    S = np.zeros((N, N))
    k = 0
    for b in blocks:
        S[k:k + b, k:k + b] = cov
        k += b
    S[np.diag_indices(N)] = var
    return S


@dataclass
class DGPSpec:
    n_nodes: int = 50
    n_times: int = 20
    d: int = 2
    blocks: tuple = None
    block_var: float = 0.8
    block_cov: float = 0.5
    phi: float = 0.3
    alpha_mean: float = 2.0
    alpha_sd: float = 0.4
    beta_mean: float = 0.7
    beta_sd: float = 0.5
    zero_share: float = None      # overrides beta_mean when set
    zero_inflated: bool = True

    def resolved_blocks(self):
        blocks = (default_blocks(self.n_nodes) if self.blocks is None
                  else tuple(int(b) for b in self.blocks))
        if sum(blocks) != self.n_nodes or min(blocks) < 1:
            raise ValueError(f'block sizes {blocks} do not partition '
                             f'{self.n_nodes} nodes')
        return blocks


def beta_mean_for_zero_share(share, beta_sd=0.5):
    """beta mean giving marginal P(z <= 0) = share.

    With beta_i + beta_j ~ N(2m, 2 s^2) and unit noise,
    P(z <= 0) = Phi(-2m / sqrt(1 + 2 s^2)); solved by bisection.
    """
    if not 0 < share < 1:
        raise ValueError('share must be in (0, 1)')
    scale = np.sqrt(1 + 2 * beta_sd ** 2)

    def f(m):
        return ndtr(-2 * m / scale) - share
    return optimize.bisect(f, -20.0, 20.0, xtol=1e-12)


@dataclass(eq=False)
class GroundTruth:
    alpha: np.ndarray
    beta: np.ndarray
    x: np.ndarray
    x0: np.ndarray
    w: np.ndarray
    z: np.ndarray
    loglam: np.ndarray
    d: int
    phi: float
    sigma: np.ndarray
    blocks: tuple
    spec: dict = field(default_factory=dict)

    _ARRAYS = ('alpha', 'beta', 'x', 'x0', 'w', 'z', 'loglam', 'sigma')

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        lines = ['truth = true', f'd = {self.d}', f'phi = {self.phi!r}',
                 'blocks = ' + ','.join(str(b) for b in self.blocks)]
        for k, v in sorted(self.spec.items()):
            lines.append(f'spec.{k} = {v}')
        for name in self._ARRAYS:
            arr = np.asarray(getattr(self, name), dtype='<f8')
            arr.tofile(os.path.join(out_dir, f'{name}.f64'))
            shape = 'x'.join(str(s) for s in arr.shape)
            lines.append(f'array.{name} = {name}.f64 shape={shape}')
        with open(os.path.join(out_dir, 'manifest.txt'), 'w') as fh:
            fh.write('\n'.join(lines) + '\n')
        return out_dir

    @classmethod
    def load(cls, out_dir):
        path = os.path.join(out_dir, 'manifest.txt')
        if not os.path.exists(path):
            raise FileNotFoundError(f'no truth manifest in {out_dir}')
        man = {}
        with open(path) as fh:
            for line in fh:
                k, _, v = line.partition(' = ')
                man[k.strip()] = v.strip()
        if man.get('truth') != 'true':
            raise ValueError(f'{out_dir} is not a ground-truth directory')
        arrays = {}
        for name in cls._ARRAYS:
            fname, _, shp = man[f'array.{name}'].partition(' shape=')
            shape = tuple(int(s) for s in shp.split('x')) if shp else ()
            arrays[name] = np.fromfile(os.path.join(out_dir, fname),
                                       dtype='<f8').reshape(shape)
        spec = {k[5:]: v for k, v in man.items() if k.startswith('spec.')}
        return cls(d=int(man['d']), phi=float(man['phi']),
                   blocks=tuple(int(b) for b in man['blocks'].split(',')),
                   spec=spec, **arrays)


def generate(spec=None, seed=0):
    """Draw a network series and its ground truth.

    Returns
    -------
    data : NetworkSeries
    truth : GroundTruth
    """
    spec = DGPSpec() if spec is None else spec
    if spec.d < 1:
        raise ValueError('d must be >= 1')
    blocks = spec.resolved_blocks()
    rng = np.random.default_rng(seed)
    N, T, d = spec.n_nodes, spec.n_times, spec.d
    sigma = block_covariance(blocks, spec.block_var, spec.block_cov)
    Ls = np.linalg.cholesky(sigma)
    bmean = (spec.beta_mean if spec.zero_share is None
             else beta_mean_for_zero_share(spec.zero_share, spec.beta_sd))

    alpha = rng.normal(spec.alpha_mean, spec.alpha_sd, N)
    beta = rng.normal(bmean, spec.beta_sd, (N, 1))
    # stationary start of the AR(1), innovations shared across features
    stat_sd = 1.0 / np.sqrt(1.0 - spec.phi ** 2) if abs(spec.phi) < 1 else 1.0
    x0 = stat_sd * (Ls @ rng.standard_normal((N, d)))
    x = np.empty((T, N, d))
    prev = x0
    for t in range(T):
        prev = spec.phi * prev + Ls @ rng.standard_normal((N, d))
        x[t] = prev
    loglam = log_intensity_all(alpha, x)
    I, J = dyad_indices(N)
    P = len(I)
    mu = (beta[I, 0] + beta[J, 0])[None, :]
    z = mu + rng.standard_normal((T, P))
    if spec.zero_inflated:
        w = z > 0
    else:
        w = np.ones((T, P), dtype=bool)
    y = rng.poisson(np.exp(loglam)) * w
    data = NetworkSeries(N, y)
    truth = GroundTruth(alpha=alpha, beta=beta, x=x, x0=x0,
                        w=w.astype(float), z=z, loglam=loglam, d=d,
                        phi=spec.phi, sigma=sigma, blocks=blocks,
                        spec={k: v for k, v in asdict(spec).items()
                              if v is not None and k != 'blocks'})
    return data, truth


# ---------------------------------------------------------------------------
# scoring

def f1_mcc(pred, truth):
    """F1 and Matthews correlation with w = 1 as the positive class."""
    pred = np.asarray(pred, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    tp = float(np.sum(pred & truth))
    tn = float(np.sum(~pred & ~truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn > 0 else 1.0
    den = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = (tp * tn - fp * fn) / den if den > 0 else 0.0
    return f1, float(mcc)


def score_against_truth(chain, truth, data=None):
    """Recovery metrics of a fitted chain against the generating truth.

    Returns a dict with F1 and MCC of the thresholded posterior mean of
    w, MSE of the intercept posterior means, MSE of the posterior mean
    log-intensity, the posterior mode of d, 95% interval coverage of
    alpha and beta and, when trajectories were stored, the aligned
    latent RMSE over draws with the true dimension.
    """
    from .diagnostics import procrustes_align
    out = {}
    w_hat = chain['w_mean'] > 0.5
    if data is not None:
        w_hat = w_hat | (data.counts > 0)
    out['f1'], out['mcc'] = f1_mcc(w_hat, truth.w > 0.5)
    alpha = chain['alpha']
    out['mse_alpha'] = float(np.mean((alpha.mean(0) - truth.alpha) ** 2))
    out['sd_alpha'] = float(np.mean(alpha.std(0)))
    out['mse_loglam'] = float(np.mean((chain['loglam_mean']
                                       - truth.loglam) ** 2))
    ds = chain['d'].astype(int)
    vals, cnt = np.unique(ds, return_counts=True)
    out['d_mode'] = int(vals[np.argmax(cnt)])
    out['share_true_d'] = float(np.mean(ds == truth.d))
    lo, hi = np.quantile(alpha, [0.025, 0.975], axis=0)
    out['cover_alpha'] = float(np.mean((lo <= truth.alpha)
                                       & (truth.alpha <= hi)))
    beta = chain['beta'][:, :, 0]
    lo, hi = np.quantile(beta, [0.025, 0.975], axis=0)
    out['cover_beta'] = float(np.mean((lo <= truth.beta[:, 0])
                                      & (truth.beta[:, 0] <= hi)))
    if 'x' in chain.arrays and len(chain['x']):
        xs = chain['x']
        keep = ~np.isnan(xs[:, 0, 0, :truth.d]).any(1) & np.isnan(
            xs[:, 0, 0, truth.d:]).all(1)
        if keep.any():
            draws = xs[keep][..., :truth.d]
            aligned, _ = procrustes_align(draws, truth.x)
            out['latent_rmse'] = float(np.sqrt(np.mean(
                (aligned.mean(0) - truth.x) ** 2)))
    return out
