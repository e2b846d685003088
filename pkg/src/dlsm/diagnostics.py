"""Chain diagnostics and output summaries.

ESS with initial-positive-sequence truncation, Geweke's convergence
diagnostic with batch-means window variances, Procrustes alignment of
latent draws, circular projection, structural-zero maps, long-format
exports and a single-site random-walk Metropolis baseline for the
static Poisson eigenmodel.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy import linalg, stats
from scipy.special import gammaln

from .model_core import dyad_indices

__all__ = ['effective_sample_size', 'geweke_cd', 'procrustes_align',
           'circular_projection', 'structural_zero_map',
           'baseline_static_mh', 'percent_ess', 'write_table',
           'trajectory_fan', 'correlation_table', 'DiagnosticWarning']


class DiagnosticWarning(UserWarning):
    pass


def _autocov(x):
    n = len(x)
    xc = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    return acov


def effective_sample_size(chain, return_flag=False):
    """ESS = n / (1 + 2 sum rho_k), truncated by the initial positive
    sequence of paired autocorrelations.

    A constant chain gets ESS = n and ``flag`` True. The value is capped
    at n log10(n) to bound antithetic super-efficiency.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = len(x)
    if n < 10:
        raise ValueError('need at least 10 draws')
    acov = _autocov(x)
    if acov[0] <= 1e-300 * max(1.0, np.abs(x).max() ** 2):
        return (float(n), True) if return_flag else float(n)
    rho = acov / acov[0]
    # Geyer: Gamma_k = rho_{2k} + rho_{2k+1}, summed while positive
    m = (n - 1) // 2
    gam = rho[0:2 * m:2] + rho[1:2 * m + 1:2]
    neg = np.flatnonzero(gam <= 0)
    k = neg[0] if len(neg) else len(gam)
    gam = gam[:k]
    # enforce monotone decrease
    if len(gam) > 1:
        gam = np.minimum.accumulate(gam)
    tau = -1.0 + 2.0 * gam.sum() if len(gam) else 1.0
    tau = max(tau, 1.0 / np.log10(max(n, 10)))
    ess = n / tau
    return (float(ess), False) if return_flag else float(ess)


def _batch_var_of_mean(x):
    n = len(x)
    b = max(1, int(np.sqrt(n)))
    k = n // b
    if k < 2:
        return np.var(x, ddof=1) / n
    means = x[:k * b].reshape(k, b).mean(1)
    return np.var(means, ddof=1) / k


def geweke_cd(chain, first_frac=0.1, last_frac=0.5):
    """Geweke z-score comparing the first and last windows.

    Returns (z, p) with a two-sided normal p-value. A window with zero
    variance yields (nan, nan) and a DiagnosticWarning.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = len(x)
    na = int(first_frac * n)
    nb = int(last_frac * n)
    if na < 2 or nb < 2 or first_frac + last_frac > 1:
        raise ValueError('chain too short for the requested windows')
    a, b = x[:na], x[n - nb:]
    va, vb = _batch_var_of_mean(a), _batch_var_of_mean(b)
    if va + vb <= 0:
        warnings.warn('zero-variance Geweke window', DiagnosticWarning)
        return float('nan'), float('nan')
    z = (a.mean() - b.mean()) / np.sqrt(va + vb)
    return float(z), float(2 * stats.norm.sf(abs(z)))


def procrustes_align(draws, reference, translate=False):
    """Rotate each draw onto ``reference`` with one orthogonal matrix.

    ``draws`` has shape (S, ..., d) and ``reference`` shape (..., d); all
    leading axes of a draw (times, nodes) share the rotation, so inner
    products are untouched. Returns (aligned, rotations); a draw whose
    cross-product is rank deficient keeps the identity and triggers a
    DiagnosticWarning.

    With ``translate`` each draw and the reference are centred over their
    leading axes before rotating and the reference centroid is added back.
    Useful for static fits, where a common shift of all positions is
    offset exactly by the intercepts.
    """
    draws = np.asarray(draws, dtype=float)
    ref = np.asarray(reference, dtype=float)
    single = draws.shape == ref.shape
    if single:
        draws = draws[None]
    if draws.shape[1:] != ref.shape:
        raise ValueError('draw and reference shapes differ')
    d = ref.shape[-1]
    B = ref.reshape(-1, d)
    shift = np.zeros(d)
    if translate:
        shift = B.mean(0)
        B = B - shift
    out = np.empty_like(draws)
    rots = np.empty((len(draws), d, d))
    flagged = 0
    for s, D in enumerate(draws):
        A = D.reshape(-1, d)
        if translate:
            A = A - A.mean(0)
        M = A.T @ B
        if np.linalg.matrix_rank(M) < d:
            R = np.eye(d)
            flagged += 1
        else:
            R, _ = linalg.orthogonal_procrustes(A, B)
        rots[s] = R
        out[s] = (A @ R + shift).reshape(D.shape)
    if flagged:
        warnings.warn(f'{flagged} rank-deficient draws left unrotated',
                      DiagnosticWarning)
    if single:
        return out[0], rots[0]
    return out, rots


def circular_projection(X):
    """Unit directions and norms of the rows of X (N, d).

    Returns (unit, norms, zero) where ``zero`` flags rows with zero norm
    (direction undefined, left as NaN).
    """
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=-1)
    zero = norms == 0
    with np.errstate(invalid='ignore', divide='ignore'):
        unit = X / norms[..., None]
    unit[zero] = np.nan
    return unit, norms, zero


def structural_zero_map(chain, counts):
    """Posterior P(z <= 0 | y) per dyad-time, forced to 0 where y > 0."""
    if 'w' in chain.arrays and len(chain['w']):
        p = 1.0 - chain['w'].mean(0)
    else:
        p = 1.0 - chain['w_mean']
    return np.where(np.asarray(counts) > 0, 0.0, p)


def percent_ess(draws):
    """Mean ESS over columns as a percentage of the number of draws."""
    draws = np.asarray(draws, dtype=float)
    flat = draws.reshape(len(draws), -1)
    ess = np.array([effective_sample_size(flat[:, k])
                    for k in range(flat.shape[1])])
    return 100.0 * ess.mean() / len(draws), ess


# ---------------------------------------------------------------------------
# exports

def write_table(path, header, rows):
    with open(path, 'w') as fh:
        fh.write(','.join(header) + '\n')
        for r in rows:
            fh.write(','.join(f'{v:.10g}' if isinstance(v, float) else str(v)
                              for v in r) + '\n')
    return path


def trajectory_fan(x_draws, level=0.9):
    """Rows (node, t, dim, mean, lo, hi), 1-based, from aligned draws
    of shape (S, T, N, d)."""
    x = np.asarray(x_draws, dtype=float)
    q = (1 - level) / 2
    mean = x.mean(0)
    lo, hi = np.quantile(x, [q, 1 - q], axis=0)
    S, T, N, d = x.shape
    rows = []
    for i in range(N):
        for t in range(T):
            for k in range(d):
                rows.append((i + 1, t + 1, k + 1, float(mean[t, i, k]),
                             float(lo[t, i, k]), float(hi[t, i, k])))
    return rows


def correlation_table(cov):
    """Rows (i, j, corr) of the correlation matrix of ``cov``."""
    cov = np.asarray(cov, dtype=float)
    s = np.sqrt(np.diag(cov))
    corr = cov / np.outer(s, s)
    n = len(s)
    return [(i + 1, j + 1, float(corr[i, j])) for i in range(n)
            for j in range(n)]


# ---------------------------------------------------------------------------
# single-site Metropolis baseline

class MHOutput:
    def __init__(self, arrays, accept):
        self.arrays = arrays
        self.accept = accept

    def __getitem__(self, key):
        return self.arrays[key]


def baseline_static_mh(data, d, config, n_iter=None, burn_in=None,
                       seed=None, target_accept=0.234):
    """Random-walk Metropolis over (alpha_i, x_i) one node at a time.

    Targets the static Poisson eigenmodel posterior with
    alpha ~ N(0, sigma_alpha2 I) and x_i ~ N(0, I_d). Proposal scales
    adapt during burn-in toward ``target_accept`` and are frozen after.
    """
    if data.n_times != 1:
        raise ValueError('baseline needs a single network')
    n_iter = config.n_iter if n_iter is None else n_iter
    burn_in = config.burn_in if burn_in is None else burn_in
    rng = np.random.default_rng(config.seed if seed is None else seed)
    N = data.n_nodes
    Y = data.adjacency(0).astype(float)
    s2a = config.sigma_alpha2
    alpha = 0.1 * np.sqrt(s2a) * rng.standard_normal(N)
    x = 0.1 * rng.standard_normal((N, d))
    log_sa = np.full(N, np.log(0.1))
    log_sx = np.full(N, np.log(0.1))
    acc_a = np.zeros(N)
    acc_x = np.zeros(N)
    out_a, out_x = [], []
    mask = ~np.eye(N, dtype=bool)

    def node_ll(i, a_i, x_i):
        eta = a_i + alpha + x @ x_i
        eta = eta[mask[i]]
        y = Y[i][mask[i]]
        return float(np.sum(y * eta - np.exp(eta)))

    for it in range(n_iter):
        for i in range(N):
            cur = node_ll(i, alpha[i], x[i])
            prop = alpha[i] + np.exp(log_sa[i]) * rng.standard_normal()
            new = node_ll(i, prop, x[i])
            lr = new - cur - 0.5 * (prop ** 2 - alpha[i] ** 2) / s2a
            ok = np.log(rng.random()) < lr
            if ok:
                alpha[i] = prop
                cur = new
            xp = x[i] + np.exp(log_sx[i]) * rng.standard_normal(d)
            new_x = node_ll(i, alpha[i], xp)
            lr = new_x - cur - 0.5 * (xp @ xp - x[i] @ x[i])
            okx = np.log(rng.random()) < lr
            if okx:
                x[i] = xp
            if it < burn_in:
                g = 1.0 / np.sqrt(it + 1.0)
                log_sa[i] += g * (float(ok) - target_accept)
                log_sx[i] += g * (float(okx) - target_accept)
            else:
                acc_a[i] += ok
                acc_x[i] += okx
        if it >= burn_in:
            out_a.append(alpha.copy())
            out_x.append(x.copy())
    n_keep = max(n_iter - burn_in, 1)
    arrays = {'alpha': np.array(out_a), 'x': np.array(out_x)[:, None]}
    return MHOutput(arrays, {'alpha': acc_a / n_keep, 'x': acc_x / n_keep})


def poisson_loglik(counts, loglam):
    """Exact Poisson log-likelihood summed over dyad-times."""
    y = np.asarray(counts, dtype=float)
    return float(np.sum(y * loglam - np.exp(loglam) - gammaln(y + 1)))
