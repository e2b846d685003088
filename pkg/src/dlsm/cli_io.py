"""Command-line interface: simulate, fit, diagnose, summarize.

Exit codes: 0 ok, 2 configuration error, 3 sampler failure, 4 missing
input.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .model_core import ConfigError, ModelConfig, NetworkSeries

EXIT_OK, EXIT_CONFIG, EXIT_SAMPLER, EXIT_INPUT = 0, 2, 3, 4

_DGP_KEYS = {
    'dgp.n_nodes': int, 'dgp.n_times': int, 'dgp.d': int,
    'dgp.blocks': lambda s: tuple(int(b) for b in s.split(',')),
    'dgp.block_var': float, 'dgp.block_cov': float, 'dgp.phi': float,
    'dgp.alpha_mean': float, 'dgp.alpha_sd': float,
    'dgp.beta_mean': float, 'dgp.beta_sd': float,
    'dgp.zero_share': float,
    'dgp.zero_inflated': lambda s: s.strip().lower() in ('true', '1', 'yes'),
}


def read_flat(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f'line {n}', f'expected key = value: '
                                  f'{line!r}')
            k, _, v = line.partition('=')
            out[k.strip()] = v.strip()
    return out


def write_flat(path, items):
    with open(path, 'w') as fh:
        for k, v in sorted(items.items()):
            fh.write(f'{k} = {v}\n')
    return path


def _load_config(path):
    items = read_flat(path) if path else {}
    return ModelConfig.from_flat(items).validate()


def _dgp_from_flat(items):
    from .synthetic import DGPSpec
    kw = {}
    seed = 0
    for k, v in items.items():
        if k == 'seed':
            seed = int(v)
            continue
        if k not in _DGP_KEYS:
            raise ConfigError(k, 'unknown configuration key')
        try:
            kw[k[4:]] = _DGP_KEYS[k](v)
        except ValueError as exc:
            raise ConfigError(k, str(exc)) from None
    return DGPSpec(**kw), seed


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args):
    from .synthetic import generate
    items = read_flat(args.config) if args.config else {}
    spec, seed = _dgp_from_flat(items)
    if args.seed is not None:
        seed = args.seed
    data, truth = generate(spec, seed)
    os.makedirs(args.out, exist_ok=True)
    data.to_csv(os.path.join(args.out, 'data.csv'))
    truth.save(os.path.join(args.out, 'truth'))
    share = 1.0 - truth.w.mean()
    print(f'structural zero share: {100 * share:.1f}%')
    return EXIT_OK


def _progress(it, state):
    print(f'iter {it}: d={state.d} alpha[0]={state.params.alpha[0]:.4f}',
          flush=True)


def cmd_fit(args):
    from .gibbs_driver import SamplerError, run_chain, run_chains
    if not os.path.exists(args.data):
        print(f'error: data file {args.data} not found', file=sys.stderr)
        return EXIT_INPUT
    data = NetworkSeries.read_csv(args.data)
    config = _load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    config.validate(data)
    try:
        if args.chains > 1:
            outs = run_chains(data, config, args.chains, args.out)
        else:
            outs = [run_chain(data, config, args.out,
                              progress=_progress if args.progress else None,
                              progress_every=args.progress,
                              resume=args.resume)]
    except SamplerError as exc:
        print(f'sampler failure: {exc}', file=sys.stderr)
        return EXIT_SAMPLER
    for k, out in enumerate(outs):
        ds = out['d'].astype(int)
        mode = int(np.bincount(ds).argmax()) if len(ds) else -1
        secs = out.timing.get('total_seconds', float('nan'))
        print(f'chain {k + 1}: retained={out.n_retained} d_mode={mode} '
              f'seconds={secs:.1f}')
    return EXIT_OK


def cmd_diagnose(args):
    from .diagnostics import (effective_sample_size, geweke_cd,
                              procrustes_align, structural_zero_map,
                              trajectory_fan, write_table, correlation_table,
                              circular_projection)
    from .gibbs_driver import load_chain
    from .synthetic import GroundTruth, score_against_truth
    try:
        chain = load_chain(args.chain)
    except FileNotFoundError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return EXIT_INPUT
    if chain.n_retained < 10:
        print('error: chain has fewer than 10 retained draws',
              file=sys.stderr)
        return EXIT_INPUT
    out = args.out or args.chain
    os.makedirs(out, exist_ok=True)
    alpha = chain['alpha']
    rows = []
    for i in range(alpha.shape[1]):
        ess = effective_sample_size(alpha[:, i])
        z, p = geweke_cd(alpha[:, i])
        rows.append((f'alpha_{i + 1}', float(alpha[:, i].mean()),
                     float(alpha[:, i].std()), ess, z, p))
    write_table(os.path.join(out, 'diagnostics.csv'),
                ['param', 'mean', 'sd', 'ess', 'geweke_z', 'geweke_p'],
                rows)
    data = None
    if args.data:
        if not os.path.exists(args.data):
            print(f'error: data file {args.data} not found',
                  file=sys.stderr)
            return EXIT_INPUT
        data = NetworkSeries.read_csv(args.data)
        szm = structural_zero_map(chain, data.counts)
        I, J = np.triu_indices(data.n_nodes, 1)
        write_table(os.path.join(out, 'structural_zeros.csv'),
                    ['t', 'i', 'j', 'p_zero'],
                    [(t + 1, int(I[p]) + 1, int(J[p]) + 1, float(szm[t, p]))
                     for t in range(szm.shape[0])
                     for p in range(szm.shape[1])])
    if 'x' in chain.arrays and len(chain['x']):
        ds = chain['d'][::chain.config.x_thin].astype(int)
        ds = ds[:len(chain['x'])]
        dm = int(np.bincount(ds).argmax())
        xs = chain['x'][ds == dm][..., :dm]
        aligned, _ = procrustes_align(xs, xs[-1])
        write_table(os.path.join(out, 'trajectories.csv'),
                    ['node', 't', 'dim', 'mean', 'lo', 'hi'],
                    trajectory_fan(aligned))
        unit, norms, _ = circular_projection(aligned.mean(0))
        T, N = norms.shape
        write_table(os.path.join(out, 'circular.csv'),
                    ['node', 't', 'norm'] + [f'u{k + 1}' for k in range(dm)],
                    [(i + 1, t + 1, float(norms[t, i]))
                     + tuple(float(u) for u in unit[t, i])
                     for t in range(T) for i in range(N)])
    if chain.config.dynamic and chain.config.parametrization == \
            'featurewise' and len(chain['cov']):
        cov = np.linalg.inv(chain['cov'][-len(chain['cov']) // 2:].mean(0))
        write_table(os.path.join(out, 'correlation.csv'), ['i', 'j', 'corr'],
                    correlation_table(cov))
    if args.score:
        if not args.truth or not os.path.exists(
                os.path.join(args.truth, 'manifest.txt')):
            print('error: --score needs --truth with a ground-truth '
                  'directory', file=sys.stderr)
            return EXIT_INPUT
        truth = GroundTruth.load(args.truth)
        metrics = score_against_truth(chain, truth, data)
        write_table(os.path.join(out, 'metrics.csv'), ['metric', 'value'],
                    [(k, float(v)) for k, v in metrics.items()])
        for k, v in metrics.items():
            print(f'{k} = {v:.6g}')
    return EXIT_OK


def cmd_summarize(args):
    from .gibbs_driver import load_chain
    try:
        chain = load_chain(args.chain)
    except FileNotFoundError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return EXIT_INPUT
    if chain.n_retained == 0:
        print('error: chain has no retained draws', file=sys.stderr)
        return EXIT_INPUT
    ds = chain['d'].astype(int)
    vals, cnt = np.unique(ds, return_counts=True)
    print(f'retained draws: {chain.n_retained}')
    print(f'truncated: {chain.truncated}')
    for v, c in zip(vals, cnt):
        print(f'P(d={v}) = {c / len(ds):.3f}')
    a = chain['alpha']
    print(f'alpha mean (first 5): '
          + ' '.join(f'{m:.4f}' for m in a.mean(0)[:5]))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog='dlsm', description=__doc__,
                                formatter_class=argparse.
                                RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest='command', required=True)

    s = sub.add_parser('simulate', help='generate a synthetic data set')
    s.add_argument('--config', help='flat key = value file (dgp.* keys)')
    s.add_argument('--out', required=True)
    s.add_argument('--seed', type=int)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser('fit', help='run the Gibbs sampler')
    f.add_argument('--data', required=True, help='t,i,j,count file')
    f.add_argument('--config', help='flat key = value file')
    f.add_argument('--out', required=True)
    f.add_argument('--seed', type=int)
    f.add_argument('--chains', type=int, default=1)
    f.add_argument('--resume', action='store_true')
    f.add_argument('--progress', type=int, default=0,
                   help='print a progress line every k iterations')
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser('diagnose', help='diagnostics and exports')
    d.add_argument('--chain', required=True)
    d.add_argument('--data')
    d.add_argument('--truth')
    d.add_argument('--score', action='store_true')
    d.add_argument('--out')
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser('summarize', help='short text summary of a chain')
    m.add_argument('--chain', required=True)
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f'configuration error: {exc}', file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
