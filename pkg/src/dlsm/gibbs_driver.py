"""Sweep orchestration, chain storage and persistence.

One iteration runs, in order: the dimension step (random d only), all
trajectories then x0, the intercepts, the transition, the state
covariance or precision, the Poisson augmentation (tau, r) and, for the
zero-inflated model, the probit block (w, z, expansions, beta). The
static model reuses the same code with a single slice and a fixed
N(0, I) prior on the positions.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import augmentation as aug_mod
from . import param_updates as pu
from .dimension import (DimensionLedger, laplace_log_marginal,
                        sample_dimension, smoothed_mode)
from .iams_tables import default_bank
from .latent_sampler import node_scan, sample_initial_state
from .model_core import (AugmentedState, ConfigError, GlobalParams,
                         ModelConfig, NetworkSeries, log_intensity_all)

__all__ = ['ChainOutput', 'SamplerError', 'ChainState', 'initialize',
           'run_chain', 'run_chains', 'load_chain', 'iteration',
           'BLOCKS']

FORMAT_VERSION = '1'

# block names in sweep order
BLOCKS = ('dimension', 'x', 'x0', 'alpha', 'phi', 'cov', 'tau_r', 'w_z',
          'beta')


class SamplerError(RuntimeError):
    def __init__(self, iteration, block, cause):
        super().__init__(f'iteration {iteration}, block {block!r}: {cause}')
        self.iteration = iteration
        self.block = block
        self.cause = cause


@dataclass
class ChainState:
    d: int
    x: np.ndarray
    x0: np.ndarray
    params: GlobalParams
    aug: AugmentedState
    ledger: DimensionLedger
    iteration: int = 0


def _param_kind(config):
    return config.parametrization if config.dynamic else 'nodewise'


def _n_threads():
    env = os.environ.get('DLSM_THREADS')
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# initialisation

def _initial_dim_params(d, N, config, rng):
    """Transition and covariance for a candidate dimension."""
    if not config.dynamic:
        return {'phi': np.zeros((d, d)), 'cov': np.eye(d), 'hs': None}
    if config.parametrization == 'nodewise':
        return {'phi': config.phi_mean * np.eye(d), 'cov': np.eye(d),
                'hs': None}
    omega = np.eye(N)
    hs = (pu.init_horseshoe(omega)
          if config.upsilon_structure == 'horseshoe' else None)
    return {'phi': config.phi_mean * np.eye(N), 'cov': omega, 'hs': hs}


def _prior_dim_params(d, N, config, rng):
    """Draw node-wise (Phi, Upsilon) from their priors."""
    if config.phi_structure == 'full':
        phi = config.phi_mean + np.sqrt(config.phi_var) * rng.standard_normal(
            (d, d))
    elif config.phi_structure == 'diagonal':
        phi = np.diag(config.phi_mean + np.sqrt(config.phi_var)
                      * rng.standard_normal(d))
    else:
        phi = config.phi_mean * np.eye(d)
    if config.upsilon_structure == 'full':
        df = d + 2 if config.iw_df is None else config.iw_df
        cov = pu.stats.invwishart.rvs(df, config.iw_scale * np.eye(d),
                                      random_state=rng)
        cov = np.atleast_2d(cov)
    else:
        cov = np.diag(config.ig_b / rng.gamma(config.ig_a, size=d))
    return {'phi': phi, 'cov': cov, 'hs': None}


def initialize(data, config, rng):
    """Random starting state.

    Intercepts, probit coefficients and trajectories are prior draws
    scaled by 0.1, with the trajectories shifted by a spectral embedding
    of the log counts when ``config.init == 'spectral'``. w = 1 on
    positive counts and Bern(0.5) elsewhere. (tau, r) are drawn from their
    conditionals; with ``init == 'prior'`` the intercepts are then drawn
    from theirs and (tau, r) refreshed once more.
    """
    T, N, P = data.n_times, data.n_nodes, data.n_dyads
    L = data.n_covariates
    alpha = 0.1 * np.sqrt(config.sigma_alpha2) * rng.standard_normal(N)
    beta = 0.1 * np.sqrt(config.sigma_beta2) * rng.standard_normal((N, L))
    dims = (range(1, config.d_max + 1) if config.random_d else [config.d])
    ledger = DimensionLedger(config.max_dim)
    shared = None
    spectral = config.init == 'spectral'
    if spectral:
        eff, _ = _spectral_start(data, 1)
        alpha = eff + 0.01 * rng.standard_normal(N)
    for d in dims:
        x = 0.1 * rng.standard_normal((T, N, d))
        if spectral:
            # per-slice alignment is done in d dimensions, so each
            # candidate gets its own embedding rather than a truncation
            x += _spectral_start(data, d)[1]
        x0 = (0.1 * rng.standard_normal((N, d)) if config.dynamic
              else np.zeros((N, d)))
        if config.dynamic and config.parametrization == 'featurewise':
            # transition and precision are shared by every candidate d
            shared = shared or _initial_dim_params(d, N, config, rng)
            ledger.put(d, x=x, x0=x0, **shared)
        else:
            ledger.put(d, x=x, x0=x0, **_initial_dim_params(d, N, config,
                                                            rng))
    if config.random_d:
        w_prior = config.prior_weights()
        d = int(rng.choice(len(w_prior), p=w_prior)) + 1
    else:
        d = config.d
    ent = ledger.get(d)
    params = GlobalParams(alpha, beta, ent['phi'], ent['cov'], ent['hs'])
    x, x0 = ent['x'].copy(), ent['x0'].copy()

    counts = data.counts
    if config.zero_inflated:
        w = (counts > 0) | (rng.random(counts.shape) < 0.5)
        mu = _utility_mean(data, beta)
        z = aug_mod.sample_utility(w, mu, rng)
    else:
        w = np.ones(counts.shape, dtype=bool)
        z = np.ones(counts.shape)
    tau1, tau2, r1, r2 = aug_mod.sample_poisson_layer(
        counts, log_intensity_all(alpha, x), rng)
    aug = AugmentedState(tau1, tau2, r1, r2, w, z)
    if not spectral:
        # centre the intercepts on the data before the first trajectory
        # scan; from alpha near zero the first scan overshoots badly
        stats_ = aug_mod.PseudoStats(counts, aug)
        params.alpha = pu.sample_alpha(stats_, x, config.sigma_alpha2, rng)
        aug.tau1, aug.tau2, aug.r1, aug.r2 = aug_mod.sample_poisson_layer(
            counts, log_intensity_all(params.alpha, x), rng)
    return ChainState(d, x, x0, params, aug, ledger)


def _spectral_start(data, d, n_fill=5):
    """Per-time embedding of log counts net of additive node effects.

    Node effects come from least squares on log(y + 0.5) over positive
    counts. At each time the residual matrix (zero where y = 0) is
    embedded with its leading nonnegative eigenpairs, its unobserved
    diagonal filled in from the low-rank fit a few times, and each
    embedding is rotated onto the previous one. Returns the node effects
    (N,) and the embeddings (T, N, d).
    """
    from scipy.linalg import orthogonal_procrustes
    T, N = data.n_times, data.n_nodes
    I, J = np.triu_indices(N, 1)
    y = data.counts
    pos = y > 0
    out = np.zeros((T, N, d))
    if not pos.any():
        return np.zeros(N), out
    rows = np.nonzero(pos)
    D = np.zeros((len(rows[0]), N))
    D[np.arange(len(rows[0])), I[rows[1]]] = 1.0
    D[np.arange(len(rows[0])), J[rows[1]]] = 1.0
    ly = np.log(y + 0.5)
    eff = np.linalg.lstsq(D, ly[pos], rcond=None)[0]
    res = np.where(pos, ly - eff[I] - eff[J], 0.0)
    for t in range(T):
        M = np.zeros((N, N))
        M[I, J] = res[t]
        M[J, I] = res[t]
        for _ in range(n_fill):
            vals, vecs = np.linalg.eigh(M)
            top = np.argsort(vals)[::-1][:d]
            emb = vecs[:, top] * np.sqrt(np.maximum(vals[top], 0.0))
            M[np.diag_indices(N)] = np.sum(emb * emb, 1)
        out[t, :, :emb.shape[1]] = emb
        if t > 0:
            R, _ = orthogonal_procrustes(out[t], out[t - 1])
            out[t] = out[t] @ R
    return eff, out


def _utility_mean(data, beta):
    from .model_core import utility_mean_all
    return utility_mean_all(beta, data.covariates)


# ---------------------------------------------------------------------------
# one sweep

class _Context:
    """Per-chain constants reused by every sweep."""

    def __init__(self, data, config):
        self.data = data
        self.config = config
        self.bank = default_bank()
        self.design = (aug_mod.BetaDesign(data.covariates, config.sigma_beta2)
                       if config.zero_inflated else None)
        self.kind = _param_kind(config)


def iteration(state, ctx, rng, trace=None):
    """Advance ``state`` by one sweep in place; returns the last Laplace
    values (NaN for fixed d)."""
    cfg, data = ctx.config, ctx.data
    counts = data.counts
    N = data.n_nodes
    block = 'dimension'

    def mark(name):
        nonlocal block
        block = name
        if trace is not None:
            trace.append(name)

    try:
        stats_ = aug_mod.PseudoStats(counts, state.aug, ctx.bank)
        W, R = stats_.node_arrays(state.params.alpha)
        order = rng.permutation(N) if cfg.random_scan else None

        if cfg.random_d:
            mark('dimension')
            _dimension_step(state, ctx, stats_, W, R, rng)

        mark('x')
        node_scan(state.x, state.x0, W, R, state.params, ctx.kind, rng,
                  order)
        if cfg.dynamic:
            mark('x0')
            state.x0 = sample_initial_state(state.x[0], state.params,
                                            ctx.kind, cfg.x0_mean,
                                            cfg.x0_var, rng)
        mark('alpha')
        state.params.alpha = pu.sample_alpha(stats_, state.x,
                                             cfg.sigma_alpha2, rng)
        if cfg.dynamic:
            mark('phi')
            _phi_step(state, cfg, rng)
            mark('cov')
            _cov_step(state, cfg, rng)
        ent = state.ledger.get(state.d)
        ent.update(phi=state.params.phi, cov=state.params.cov,
                   hs=state.params.hs, x=state.x.copy(), x0=state.x0.copy())

        mark('tau_r')
        log_lam = log_intensity_all(state.params.alpha, state.x)
        a = state.aug
        a.tau1, a.tau2, a.r1, a.r2 = aug_mod.sample_poisson_layer(
            counts, log_lam, rng, ctx.bank)
        if cfg.zero_inflated:
            mark('w_z')
            w, z, beta, gamma = aug_mod.sample_zero_inflation(
                counts, log_lam, a.z, state.params.beta, ctx.design, rng,
                expansions=cfg.expansions, gamma1_var=cfg.gamma1_var,
                gamma2_a=cfg.gamma2_a, gamma2_b=cfg.gamma2_b)
            mark('beta')
            a.w, a.z, a.gamma = w, z, gamma
            state.params.beta = beta
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        raise SamplerError(state.iteration, block, exc) from exc
    state.iteration += 1
    return state.ledger.logml


def _dimension_step(state, ctx, stats_, W, R, rng):
    cfg = ctx.config
    led = state.ledger
    modes, drawn = {}, {}
    for d in range(1, cfg.d_max + 1):
        ent = led.get(d)
        if d == state.d or ctx.kind == 'featurewise':
            p = state.params if d == state.d else GlobalParams(
                state.params.alpha, state.params.beta, state.params.phi,
                state.params.cov, state.params.hs)
            start, start0 = ((state.x, state.x0) if d == state.d
                             else (ent['x'], ent['x0']))
        else:
            p = GlobalParams(state.params.alpha, state.params.beta,
                             ent['phi'], ent['cov'], ent['hs'])
            start, start0 = ent['x'], ent['x0']
        kcfg = _kind_cfg(cfg, ctx)
        if d != state.d and cfg.candidate_start == 'draw':
            # inactive candidates take one stochastic sweep first, so that
            # every x_hat is a mean scan from a draw, as for the active d
            start = node_scan(np.array(start), start0, W, R, p, ctx.kind,
                              rng)
            if cfg.dynamic:
                start0 = sample_initial_state(start[0], p, ctx.kind,
                                              cfg.x0_mean, cfg.x0_var, rng)
            drawn[d] = (start, start0)
        xh, x0h = smoothed_mode(start, start0, W, R, p, kcfg)
        modes[d] = (xh, x0h)
        led.logml[d - 1] = laplace_log_marginal(xh, x0h, stats_,
                                                state.params.alpha, p, cfg)
    new_d = sample_dimension(led.logml, cfg.prior_weights(), rng)
    for d, (xh, x0h) in modes.items():
        if d != new_d:
            # latest trajectory evaluated under d: the draw, else the mode
            led.put(d, x=drawn.get(d, (xh,))[0],
                    x0=drawn.get(d, (None, x0h))[1])
            if cfg.inactive == 'prior' and ctx.kind == 'nodewise' \
                    and cfg.dynamic:
                led.put(d, **_prior_dim_params(d, ctx.data.n_nodes, cfg,
                                               rng))
    if new_d != state.d:
        state.d = new_d
        state.x, state.x0 = modes[new_d][0].copy(), modes[new_d][1].copy()
        if ctx.kind == 'nodewise':
            ent = led.get(new_d)
            state.params = GlobalParams(state.params.alpha,
                                        state.params.beta, ent['phi'],
                                        ent['cov'], ent['hs'])


def _kind_cfg(cfg, ctx):
    if ctx.kind == cfg.parametrization:
        return cfg
    return cfg.replace(parametrization=ctx.kind)


def _phi_step(state, cfg, rng):
    p = state.params
    if cfg.parametrization == 'nodewise':
        p.phi = pu.sample_phi(state.x, state.x0, p.cov, cfg.phi_structure,
                              cfg.phi_mean, cfg.phi_var, rng, phi=p.phi)
    else:
        p.phi = pu.sample_phi_tilde(state.x, state.x0, p.cov,
                                    cfg.phi_structure, cfg.phi_mean,
                                    cfg.phi_var, rng, phi=p.phi)


def _cov_step(state, cfg, rng):
    p = state.params
    if cfg.parametrization == 'nodewise':
        p.cov = pu.sample_upsilon(state.x, state.x0, p.phi,
                                  cfg.upsilon_structure, rng, cfg.iw_df,
                                  cfg.iw_scale, cfg.ig_a, cfg.ig_b)
    elif cfg.upsilon_structure == 'horseshoe':
        T, N, d = state.x.shape
        S = pu.residual_scatter(state.x, state.x0, p.phi)
        n = T * d if cfg.horseshoe_exponent == 'td' else N * d
        p.cov, p.hs = pu.sample_omega_horseshoe(S, n, p.cov, p.hs, rng)
    else:
        p.cov = pu.sample_omega(state.x, state.x0, p.phi,
                                cfg.upsilon_structure, rng, cfg.iw_df,
                                cfg.iw_scale, cfg.ig_a, cfg.ig_b)


# ---------------------------------------------------------------------------
# storage

@dataclass
class ChainOutput:
    """Retained draws plus bookkeeping.

    Arrays are indexed by retained draw. Dimension-dependent arrays are
    padded with NaN to the largest candidate dimension. ``w_mean`` and
    ``loglam_mean`` are running means over all retained draws and are
    kept even when the draws themselves are not stored.
    """
    config: ModelConfig
    arrays: dict
    n_completed: int
    truncated: bool = False
    error: str = ''
    timing: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.arrays[key]

    @property
    def n_retained(self):
        return len(self.arrays['d'])

    def manifest(self):
        cfg = self.config
        lines = [('version', FORMAT_VERSION), ('seed', cfg.seed),
                 ('config_hash', cfg.hash()), ('n_iter', cfg.n_iter),
                 ('burn_in', cfg.burn_in), ('thin', cfg.thin),
                 ('completed', self.n_completed),
                 ('retained', self.n_retained),
                 ('truncated', 'true' if self.truncated else 'false')]
        if self.error:
            lines.append(('error', self.error.replace('\n', ' ')))
        for k, v in sorted(cfg.to_flat().items()):
            lines.append((f'config.{k}', v))
        for name in sorted(self.arrays):
            shape = 'x'.join(str(s) for s in self.arrays[name].shape)
            lines.append((f'array.{name}', f'{name}.f64 shape={shape}'))
        return '\n'.join(f'{k} = {v}' for k, v in lines) + '\n'

    def save(self, out_dir, export_csv=True):
        os.makedirs(out_dir, exist_ok=True)
        for name, arr in self.arrays.items():
            np.ascontiguousarray(arr, dtype='<f8').tofile(
                os.path.join(out_dir, f'{name}.f64'))
        with open(os.path.join(out_dir, 'manifest.txt'), 'w') as fh:
            fh.write(self.manifest())
        if self.timing:
            with open(os.path.join(out_dir, 'timing.txt'), 'w') as fh:
                for k, v in sorted(self.timing.items()):
                    fh.write(f'{k} = {v:.6f}\n')
        if export_csv:
            self.export_scalars(os.path.join(out_dir, 'scalars.csv'))
        return out_dir

    def export_scalars(self, path):
        d = self.arrays['d']
        alpha = self.arrays['alpha']
        header = ['draw', 'd'] + [f'alpha_{i + 1}'
                                  for i in range(alpha.shape[1])]
        with open(path, 'w') as fh:
            fh.write(','.join(header) + '\n')
            for k in range(len(d)):
                vals = [str(k), str(int(d[k]))] + [repr(float(v))
                                                   for v in alpha[k]]
                fh.write(','.join(vals) + '\n')
        return path

    def digest(self):
        """Hash of the manifest and every array (wall-clock excluded)."""
        import hashlib
        h = hashlib.sha256(self.manifest().encode())
        for name in sorted(self.arrays):
            h.update(np.ascontiguousarray(self.arrays[name],
                                          dtype='<f8').tobytes())
        return h.hexdigest()


def read_manifest(chain_dir):
    path = os.path.join(chain_dir, 'manifest.txt')
    if not os.path.exists(path):
        raise FileNotFoundError(f'no manifest in {chain_dir}')
    out = {}
    with open(path) as fh:
        for line in fh:
            if '=' in line:
                k, _, v = line.partition(' = ')
                out[k.strip()] = v.strip()
    return out


def load_chain(chain_dir):
    """Read a chain directory written by :meth:`ChainOutput.save`."""
    man = read_manifest(chain_dir)
    flat = {k[len('config.'):]: v for k, v in man.items()
            if k.startswith('config.')}
    config = ModelConfig.from_flat(flat)
    arrays = {}
    for k, v in man.items():
        if not k.startswith('array.'):
            continue
        name = k[len('array.'):]
        fname, _, shp = v.partition(' shape=')
        shape = tuple(int(s) for s in shp.split('x')) if shp else ()
        arr = np.fromfile(os.path.join(chain_dir, fname), dtype='<f8')
        arrays[name] = arr.reshape(shape)
    return ChainOutput(config, arrays, int(man['completed']),
                       man['truncated'] == 'true', man.get('error', ''))


class _Recorder:
    def __init__(self, data, config):
        self.cfg = config
        self.T, self.N, self.P = data.n_times, data.n_nodes, data.n_dyads
        self.L = data.n_covariates
        self.dm = config.max_dim
        self.lists = {k: [] for k in ('d', 'alpha', 'beta', 'phi', 'cov',
                                      'logml', 'x', 'x0', 'w')}
        self.w_sum = np.zeros((self.T, self.P))
        self.ll_sum = np.zeros((self.T, self.P))
        self.n = 0

    def _pad(self, a, shape):
        out = np.full(shape, np.nan)
        out[tuple(slice(0, s) for s in a.shape)] = a
        return out

    def record(self, state):
        cfg = self.cfg
        p = state.params
        ls = self.lists
        ls['d'].append(state.d)
        ls['alpha'].append(p.alpha.copy())
        ls['beta'].append(p.beta.copy())
        fw = cfg.dynamic and cfg.parametrization == 'featurewise'
        side = self.N if fw else self.dm
        ls['phi'].append(self._pad(np.atleast_2d(p.phi), (side, side)))
        ls['cov'].append(self._pad(np.atleast_2d(p.cov), (side, side)))
        ls['logml'].append(state.ledger.logml.copy())
        if cfg.store_x and self.n % cfg.x_thin == 0:
            ls['x'].append(self._pad(state.x, (self.T, self.N, self.dm)))
            ls['x0'].append(self._pad(state.x0, (self.N, self.dm)))
        if cfg.store_w:
            ls['w'].append(state.aug.w.astype(float))
        self.w_sum += state.aug.w
        self.ll_sum += log_intensity_all(p.alpha, state.x)
        self.n += 1

    def arrays(self):
        out = {}
        shapes = {'d': (), 'alpha': (self.N,), 'beta': (self.N, self.L),
                  'logml': (self.dm,), 'x': (self.T, self.N, self.dm),
                  'x0': (self.N, self.dm), 'w': (self.T, self.P)}
        for k, v in self.lists.items():
            if v:
                out[k] = np.array(v, dtype=float)
            elif k in shapes:
                if k in ('x', 'x0') and not self.cfg.store_x:
                    continue
                if k == 'w' and not self.cfg.store_w:
                    continue
                out[k] = np.zeros((0,) + shapes[k])
        n = max(self.n, 1)
        out['w_mean'] = self.w_sum / n
        out['loglam_mean'] = self.ll_sum / n
        return out


def _state_path(out_dir):
    return os.path.join(out_dir, 'state.npz')


def _save_state(state, rng, out_dir, rec=None):
    p = state.params
    payload = {'d': np.array(state.d), 'x': state.x, 'x0': state.x0,
               'alpha': p.alpha, 'beta': p.beta, 'phi': p.phi, 'cov': p.cov,
               'tau1': state.aug.tau1, 'tau2': state.aug.tau2,
               'r1': state.aug.r1, 'r2': state.aug.r2, 'w': state.aug.w,
               'z': state.aug.z, 'iteration': np.array(state.iteration),
               'logml': state.ledger.logml,
               'rng': np.array(json.dumps(rng.bit_generator.state))}
    if p.hs is not None:
        for k, v in p.hs.items():
            payload[f'hs_{k}'] = v
    if rec is not None:
        # exact running sums, so a resumed chain reproduces the means
        payload['sum_w'] = rec.w_sum
        payload['sum_loglam'] = rec.ll_sum
    for d, ent in state.ledger.entries.items():
        for k in ('x', 'x0', 'phi', 'cov'):
            payload[f'led{d}_{k}'] = ent[k]
        if ent.get('hs') is not None:
            for k, v in ent['hs'].items():
                payload[f'led{d}_hs_{k}'] = v
    np.savez(_state_path(out_dir), **payload)


def _load_state(out_dir, config):
    f = np.load(_state_path(out_dir))
    hs = ({k[3:]: f[k] for k in f.files if k.startswith('hs_')} or None)
    params = GlobalParams(f['alpha'], f['beta'], f['phi'], f['cov'], hs)
    aug = AugmentedState(f['tau1'], f['tau2'], f['r1'], f['r2'],
                         f['w'], f['z'])
    ledger = DimensionLedger(config.max_dim, logml=f['logml'].copy())
    for key in f.files:
        if key.startswith('led'):
            dpart, _, name = key[3:].partition('_')
            d = int(dpart)
            ent = ledger.entries.setdefault(d, {'hs': None})
            if name.startswith('hs_'):
                ent['hs'] = ent['hs'] or {}
                ent['hs'][name[3:]] = f[key]
            else:
                ent[name] = f[key]
    state = ChainState(int(f['d']), f['x'], f['x0'], params, aug, ledger,
                       int(f['iteration']))
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(str(f['rng']))
    return state, rng


# ---------------------------------------------------------------------------
# drivers

def run_chain(data, config, out_dir=None, progress=None, progress_every=0,
              trace=None, resume=False):
    """Run one chain.

    Parameters
    ----------
    data : NetworkSeries
    config : ModelConfig
    out_dir : str, optional
        Where to persist the chain (and a resumable final state).
    progress : callable, optional
        Called as ``progress(iteration, state)`` every ``progress_every``
        iterations.
    trace : list, optional
        Receives the block names executed, in order.
    resume : bool
        Continue the chain stored in ``out_dir`` up to ``config.n_iter``.
        Refuses when the stored configuration hash differs.

    Raises
    ------
    SamplerError
        On a block failure, after flushing the partial chain with
        ``truncated = true``.
    """
    config.validate(data)
    ctx = _Context(data, config)
    rec = _Recorder(data, config)
    t_start = time.perf_counter()
    if resume:
        if out_dir is None:
            raise ValueError('resume needs out_dir')
        man = read_manifest(out_dir)
        if man.get('config_hash') != config.hash():
            raise ConfigError('config_hash',
                              'stored chain was run with a different '
                              'configuration')
        prev = load_chain(out_dir)
        state, rng = _load_state(out_dir, config)
        rec.n = prev.n_retained
        for k in rec.lists:
            if k in prev.arrays:
                rec.lists[k] = list(prev.arrays[k])
        rec.w_sum = prev.arrays['w_mean'] * max(prev.n_retained, 1)
        rec.ll_sum = prev.arrays['loglam_mean'] * max(prev.n_retained, 1)
        if prev.n_retained == 0:
            rec.w_sum[:] = 0
            rec.ll_sum[:] = 0
        with np.load(_state_path(out_dir)) as f:
            if 'sum_w' in f.files:
                rec.w_sum = f['sum_w'].copy()
                rec.ll_sum = f['sum_loglam'].copy()
    else:
        rng = np.random.default_rng(config.seed)
        state = initialize(data, config, rng)
    t_init = time.perf_counter() - t_start

    error = ''
    try:
        while state.iteration < config.n_iter:
            it = state.iteration
            iteration(state, ctx, rng, trace)
            if it >= config.burn_in and (it - config.burn_in + 1) \
                    % config.thin == 0:
                rec.record(state)
            if progress is not None and progress_every and \
                    (it + 1) % progress_every == 0:
                progress(it + 1, state)
    except SamplerError as exc:
        error = str(exc)
        out = ChainOutput(config, rec.arrays(), state.iteration, True, error,
                          {'sampling_seconds': time.perf_counter() - t_start})
        if out_dir is not None:
            out.save(out_dir)
        raise
    elapsed = time.perf_counter() - t_start
    out = ChainOutput(config, rec.arrays(), state.iteration, False, '',
                      {'init_seconds': t_init, 'total_seconds': elapsed})
    out.final_state = state
    if out_dir is not None:
        out.save(out_dir)
        _save_state(state, rng, out_dir, rec)
    return out


def _run_one(args):
    data, config, out_dir = args
    out = run_chain(data, config, out_dir)
    out.final_state = None
    return out


def run_chains(data, config, n_chains, out_dir=None, workers=None):
    """Independent chains with seeds ``seed, seed+1, ...``.

    Chains run in separate processes, at most ``workers`` at a time
    (default: the DLSM_THREADS cap or the CPU count).
    """
    jobs = []
    for k in range(n_chains):
        cfg = config.replace(seed=config.seed + k)
        sub = None if out_dir is None else os.path.join(out_dir,
                                                        f'chain{k + 1}')
        jobs.append((data, cfg, sub))
    workers = min(n_chains, workers or _n_threads())
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))
