"""Block draws of whole latent trajectories from banded precisions.

A node's trajectory x_{i,1..T} in R^d has a Gaussian full conditional
whose precision is block tridiagonal with d x d blocks. It is stored in
LAPACK upper band form with bandwidth 2d - 1, factorised once, and used
both for the mean solve and for the draw, so the cost is O(T d^3) with
no forward/backward recursion.

Layout conventions: ``x`` has shape (T, N, d), ``x0`` has shape (N, d).
Block ``off[t]`` of a system is the (t+1, t) block of the precision.
"""
from __future__ import annotations

from typing import NamedTuple

import numba
import numpy as np
from scipy import linalg
from scipy.linalg import lapack

__all__ = ['TrajectorySystem', 'LikelihoodRows', 'NotPositiveDefiniteError',
           'assemble_likelihood', 'likelihood_blocks',
           'prior_precision_nodewise', 'FeaturewisePrior',
           'prior_conditional_featurewise', 'sample_trajectory',
           'sample_initial_state', 'node_scan']


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class TrajectorySystem:
    """Gaussian system in canonical form: precision K and linear term h.

    Parameters
    ----------
    diag : ndarray (T, d, d)
        Diagonal blocks of K.
    off : ndarray (T-1, d, d)
        Sub-diagonal blocks K[t+1, t].
    h : ndarray (T, d)
        Linear term; the mean is K^{-1} h.
    """

    def __init__(self, diag, off, h):
        self.diag = np.array(diag, dtype=float)
        self.off = np.array(off, dtype=float)
        self.h = np.array(h, dtype=float)
        self.T, self.d = self.h.shape
        self._chol = None

    def add_likelihood(self, A, b):
        """Add per-time precision blocks A (T, d, d) and linear terms b."""
        self.diag += A
        self.h += b
        self._chol = None
        return self

    def copy(self):
        return TrajectorySystem(self.diag, self.off, self.h)

    @property
    def bandwidth(self):
        return 2 * self.d - 1

    def banded(self):
        """Upper band storage ab[u + r - c, c] = K[r, c] for r <= c."""
        T, d = self.T, self.d
        u = self.bandwidth
        ab = np.zeros((u + 1, T * d))
        start = np.arange(T) * d
        for a in range(d):
            for b in range(a, d):
                ab[u + a - b, start + b] = self.diag[:, a, b]
            if T > 1:
                for b in range(d):
                    # K[t d + a, (t+1) d + b] = off[t][b, a]
                    ab[u + a - d - b, start[:-1] + d + b] = self.off[:, b, a]
        return ab

    def dense(self):
        T, d = self.T, self.d
        K = np.zeros((T * d, T * d))
        for t in range(T):
            K[t * d:(t + 1) * d, t * d:(t + 1) * d] = self.diag[t]
        for t in range(T - 1):
            K[(t + 1) * d:(t + 2) * d, t * d:(t + 1) * d] = self.off[t]
            K[t * d:(t + 1) * d, (t + 1) * d:(t + 2) * d] = self.off[t].T
        return K

    def factor(self):
        if self._chol is None:
            try:
                self._chol = linalg.cholesky_banded(self.banded(),
                                                    lower=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(
                    f'trajectory precision not positive definite: {exc}'
                ) from None
        return self._chol

    def mean(self):
        U = self.factor()
        m = linalg.cho_solve_banded((U, False), self.h.reshape(-1))
        return m.reshape(self.T, self.d)

    def sample(self, rng):
        U = self.factor()
        m = linalg.cho_solve_banded((U, False), self.h.reshape(-1))
        eps = rng.standard_normal((len(m), 1))
        # K = U'U, so U^{-1} eps has covariance K^{-1}
        dev, info = lapack.dtbtrs(U, eps, uplo='U')
        if info != 0:
            raise NotPositiveDefiniteError('banded triangular solve failed')
        return (m + dev[:, 0]).reshape(self.T, self.d)


def sample_trajectory(system, rng):
    """Exact draw from N(K^{-1} h, K^{-1}), shape (T, d)."""
    return system.sample(rng)


# ---------------------------------------------------------------------------
# likelihood

class LikelihoodRows(NamedTuple):
    t: np.ndarray        # (n,) time index
    coef: np.ndarray     # (n, d) coefficient x_{j,t}
    value: np.ndarray    # (n,) pseudo-value minus intercepts
    var: np.ndarray      # (n,) pseudo-variance
    j: np.ndarray        # (n,) partner node


def assemble_likelihood(i, counts, aug, x, alpha, bank=None):
    """Explicit pseudo-observation rows involving node ``i``.

    One row for each active pseudo-observation of a dyad (i, j) with
    w = 1: two rows when y > 0, one when y = 0. Rows are returned for
    checking and inspection; the sampler uses the aggregated form of
    :func:`likelihood_blocks`.
    """
    from .augmentation import pseudo_observation
    from .iams_tables import default_bank
    bank = default_bank() if bank is None else bank
    counts = np.asarray(counts)
    T, N, d = x.shape
    I, J = np.triu_indices(N, 1)
    sel = np.flatnonzero((I == i) | (J == i))
    other = np.where(I[sel] == i, J[sel], I[sel])
    ts, cs, vs, ss, js = [], [], [], [], []
    for t in range(T):
        for p, j in zip(sel, other):
            if not aug.w[t, p]:
                continue
            off = alpha[i] + alpha[j]
            v, s = pseudo_observation(aug.tau1[t, p], aug.r1[t, p], 1, bank)
            ts.append(t), cs.append(x[t, j]), vs.append(float(v) - off)
            ss.append(float(s)), js.append(j)
            y = counts[t, p]
            if y > 0:
                v, s = pseudo_observation(aug.tau2[t, p], aug.r2[t, p], y,
                                          bank)
                ts.append(t), cs.append(x[t, j]), vs.append(float(v) - off)
                ss.append(float(s)), js.append(j)
    return LikelihoodRows(np.array(ts, dtype=np.int64),
                          np.array(cs, dtype=float).reshape(-1, d),
                          np.array(vs), np.array(ss),
                          np.array(js, dtype=np.int64))


def rows_to_blocks(rows, T, d):
    """Per-time precision and linear term from explicit rows."""
    A = np.zeros((T, d, d))
    b = np.zeros((T, d))
    for t, g, v, s in zip(rows.t, rows.coef, rows.value, rows.var):
        A[t] += np.outer(g, g) / s
        b[t] += g * v / s
    return A, b


def likelihood_blocks(i, W, R, x):
    """Aggregated likelihood of node ``i`` from the arrays of
    :meth:`PseudoStats.node_arrays`; returns A (T, d, d) and b (T, d)."""
    w = W[:, i]
    A = np.einsum('tj,tjk,tjl->tkl', w, x, x)
    b = np.einsum('tj,tjk->tk', R[:, i], x)
    return A, b


# ---------------------------------------------------------------------------
# priors

def prior_precision_nodewise(phi, upsilon, x0_i, T):
    """Prior of one trajectory given its initial state (node-wise).

    x_1 ~ N(phi x0, U), x_t ~ N(phi x_{t-1}, U). Diagonal blocks are
    U^{-1} + phi' U^{-1} phi (U^{-1} at the last time), sub-diagonal
    blocks -U^{-1} phi and the linear term is U^{-1} phi x0 at t = 1.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    d = phi.shape[0]
    try:
        cf = linalg.cho_factor(np.atleast_2d(upsilon))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError('Upsilon not positive definite') \
            from None
    Q = linalg.cho_solve(cf, np.eye(d))
    QF = Q @ phi
    diag = np.broadcast_to(Q + phi.T @ QF, (T, d, d)).copy()
    diag[-1] = Q
    off = np.broadcast_to(-QF, (max(T - 1, 0), d, d)).copy()
    h = np.zeros((T, d))
    h[0] = QF @ np.asarray(x0_i, dtype=float)
    return TrajectorySystem(diag, off, h)


class FeaturewisePrior:
    """Cached products of the feature-wise transition and precision.

    Each feature follows x_{:l,t} ~ N(Phi~ x_{:l,t-1}, Omega~^{-1}). The
    joint precision of one feature path has diagonal blocks
    Omega~ + Phi~' Omega~ Phi~ (Omega~ at the last time) and sub-diagonal
    blocks -Omega~ Phi~.
    """

    def __init__(self, phi_t, omega_t):
        self.phi = np.asarray(phi_t, dtype=float)
        self.omega = np.asarray(omega_t, dtype=float)
        self.C = self.omega @ self.phi
        self.M = self.omega + self.phi.T @ self.C


def prior_conditional_featurewise(prior, x, x0, i):
    """Conditional prior of node ``i``'s trajectory given all other nodes.

    Only row/column ``i`` of the N x N coefficient matrices enters, so
    the full NdT x NdT joint precision is never formed.
    """
    T, N, d = x.shape
    M, C, Om = prior.M, prior.C, prior.omega
    a = np.full(T, M[i, i])
    a[-1] = Om[i, i]
    eye = np.eye(d)
    diag = a[:, None, None] * eye
    off = np.broadcast_to(-C[i, i] * eye, (max(T - 1, 0), d, d)).copy()

    m_row = M[i].copy()
    m_row[i] = 0.0
    o_row = Om[i].copy()
    o_row[i] = 0.0
    c_row = C[i].copy()
    c_row[i] = 0.0
    c_col = C[:, i].copy()
    c_col[i] = 0.0

    h = np.empty((T, d))
    h[:-1] = -np.einsum('j,tjk->tk', m_row, x[:-1])
    h[-1] = -o_row @ x[-1]
    h[0] += C[i] @ x0
    if T > 1:
        h[1:] += np.einsum('j,tjk->tk', c_row, x[:-1])
        h[:-1] += np.einsum('j,tjk->tk', c_col, x[1:])
    return TrajectorySystem(diag, off, h)


def static_prior(d, upsilon=None):
    """Prior of a single-slice latent position, N(0, Upsilon)."""
    ups = np.eye(d) if upsilon is None else upsilon
    return prior_precision_nodewise(np.zeros((d, d)), ups, np.zeros(d), 1)


# ---------------------------------------------------------------------------
# sweeps

def node_system(i, x, x0, W, R, params, parametrization, fw_prior=None):
    """Full conditional system of node ``i`` (prior plus likelihood)."""
    T = x.shape[0]
    if parametrization == 'nodewise':
        sys_ = prior_precision_nodewise(params.phi, params.cov, x0[i], T)
    else:
        if fw_prior is None:
            fw_prior = FeaturewisePrior(params.phi, params.cov)
        sys_ = prior_conditional_featurewise(fw_prior, x, x0, i)
    A, b = likelihood_blocks(i, W, R, x)
    return sys_.add_likelihood(A, b)


# ---------------------------------------------------------------------------
# compiled sweep
#
# Same systems as node_system, factorised as block-tridiagonal Cholesky
# K = L L' with d x d blocks. The draw is m + L'^{-1} eps.

@numba.njit(cache=True)
def _chol_small(S, L):
    d = S.shape[0]
    for c in range(d):
        v = S[c, c]
        for k in range(c):
            v -= L[c, k] * L[c, k]
        if not v > 0.0:
            return False
        L[c, c] = np.sqrt(v)
        for r in range(c + 1, d):
            v = S[r, c]
            for k in range(c):
                v -= L[r, k] * L[c, k]
            L[r, c] = v / L[c, c]
        for r in range(c):
            L[r, c] = 0.0
    return True


@numba.njit(cache=True)
def _solve_block_tridiag(diag, off, h, eps, draw, out):
    """Mean (plus L'^{-1} eps when ``draw``) of a block-tridiagonal
    system; returns False if K is not positive definite."""
    T, d = h.shape
    Ld = np.zeros((T, d, d))
    Ls = np.zeros((T, d, d))          # Ls[t] = L[t, t-1]
    S = np.empty((d, d))
    for t in range(T):
        for a in range(d):
            for b in range(d):
                v = diag[t, a, b]
                if t > 0:
                    for k in range(d):
                        v -= Ls[t, a, k] * Ls[t, b, k]
                S[a, b] = v
        if not _chol_small(S, Ld[t]):
            return False
        if t + 1 < T:
            # Ls[t+1] = off[t] Ld[t]^{-T}: solve X Ld' = off row by row
            for a in range(d):
                for c in range(d):
                    v = off[t, a, c]
                    for k in range(c):
                        v -= Ls[t + 1, a, k] * Ld[t, c, k]
                    Ls[t + 1, a, c] = v / Ld[t, c, c]
    y = np.empty((T, d))
    for t in range(T):
        for a in range(d):
            v = h[t, a]
            if t > 0:
                for k in range(d):
                    v -= Ls[t, a, k] * y[t - 1, k]
            for k in range(a):
                v -= Ld[t, a, k] * y[t, k]
            y[t, a] = v / Ld[t, a, a]
    if draw:
        for t in range(T):
            for a in range(d):
                y[t, a] += eps[t, a]
    for t in range(T - 1, -1, -1):
        for a in range(d - 1, -1, -1):
            v = y[t, a]
            if t + 1 < T:
                for k in range(d):
                    v -= Ls[t + 1, k, a] * out[t + 1, k]
            for k in range(a + 1, d):
                v -= Ld[t, k, a] * out[t, k]
            out[t, a] = v / Ld[t, a, a]
    return True


@numba.njit(cache=True)
def _scan_kernel(x, x0, W, R, featurewise, Q, QF, M, C, Om, eps, draw,
                 order):
    """Sequential sweep over ``order``; returns the failing node or -1."""
    T, N, d = x.shape
    diag = np.zeros((T, d, d))
    off = np.zeros((max(T - 1, 0), d, d))
    h = np.zeros((T, d))
    out = np.empty((T, d))
    for i in order:
        diag[:] = 0.0
        off[:] = 0.0
        h[:] = 0.0
        if featurewise:
            for t in range(T):
                a = Om[i, i] if t == T - 1 else M[i, i]
                for k in range(d):
                    diag[t, k, k] = a
                if t < T - 1:
                    for k in range(d):
                        off[t, k, k] = -C[i, i]
            for j in range(N):
                for k in range(d):
                    h[0, k] += C[i, j] * x0[j, k]
                if j == i:
                    continue
                for t in range(T):
                    m = Om[i, j] if t == T - 1 else M[i, j]
                    for k in range(d):
                        v = -m * x[t, j, k]
                        if t > 0:
                            v += C[i, j] * x[t - 1, j, k]
                        if t < T - 1:
                            v += C[j, i] * x[t + 1, j, k]
                        h[t, k] += v
        else:
            # M holds Q + Phi' Q Phi, the last block is Q
            for t in range(T):
                for a in range(d):
                    for b in range(d):
                        diag[t, a, b] = Q[a, b] if t == T - 1 else M[a, b]
                        if t < T - 1:
                            off[t, a, b] = -QF[a, b]
            for a in range(d):
                for k in range(d):
                    h[0, a] += QF[a, k] * x0[i, k]
        for t in range(T):
            for j in range(N):
                if j == i:
                    continue
                w = W[t, i, j]
                r = R[t, i, j]
                if w == 0.0 and r == 0.0:
                    continue
                for a in range(d):
                    xa = x[t, j, a]
                    h[t, a] += r * xa
                    for b in range(d):
                        diag[t, a, b] += w * xa * x[t, j, b]
        if not _solve_block_tridiag(diag, off, h, eps[i], draw, out):
            return i
        for t in range(T):
            for a in range(d):
                x[t, i, a] = out[t, a]
    return -1


def node_scan(x, x0, W, R, params, parametrization, rng=None, order=None):
    """One pass over nodes updating x in place.

    With ``rng`` each trajectory is drawn from its full conditional;
    without it the conditional mean is used instead (mode search).
    """
    T, N, d = x.shape
    order = np.arange(N) if order is None else np.asarray(order, np.int64)
    draw = rng is not None
    eps = (rng.standard_normal((N, T, d)) if draw
           else np.zeros((N, T, d)))
    if parametrization == 'featurewise':
        fw = FeaturewisePrior(params.phi, params.cov)
        Q = QF = np.zeros((d, d))
        M, C, Om = fw.M, fw.C, fw.omega
    else:
        phi = np.atleast_2d(np.asarray(params.phi, dtype=float))
        try:
            cf = linalg.cho_factor(np.atleast_2d(params.cov))
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError('Upsilon not positive definite') \
                from None
        Q = linalg.cho_solve(cf, np.eye(d))
        QF = Q @ phi
        M = Q + phi.T @ QF
        C = Om = np.zeros((1, 1))
    # permute eps so the k-th visited node uses the k-th row
    e = np.empty_like(eps)
    e[order] = eps[:len(order)]
    bad = _scan_kernel(x, np.ascontiguousarray(x0, dtype=float), W, R,
                       parametrization == 'featurewise', Q, QF,
                       np.ascontiguousarray(M), np.ascontiguousarray(C),
                       np.ascontiguousarray(Om), e, draw, order)
    if bad >= 0:
        raise NotPositiveDefiniteError(
            f'trajectory precision of node {bad} not positive definite')
    return x


def node_scan_reference(x, x0, W, R, params, parametrization, rng=None,
                        order=None):
    """Pure numpy/scipy version of :func:`node_scan` (banded LAPACK)."""
    N = x.shape[1]
    fw = None
    if parametrization == 'featurewise':
        fw = FeaturewisePrior(params.phi, params.cov)
    for i in (range(N) if order is None else order):
        sys_ = node_system(i, x, x0, W, R, params, parametrization, fw)
        x[:, i] = sys_.mean() if rng is None else sys_.sample(rng)
    return x


def initial_state_system(x1, params, parametrization, x0_mean, x0_var):
    """Precision and linear terms of x0 given the first slice.

    Node-wise: each node independently, precision I/v0 + phi' U^{-1} phi.
    Feature-wise: each feature column independently, precision
    I/v0 + Phi~' Omega~ Phi~. Returns (precision, H) with H of shape
    (N, d) in both cases; in the feature-wise case the N x N precision
    acts on the node axis, so no commutation matrix is needed.
    """
    x1 = np.asarray(x1, dtype=float)
    N, d = x1.shape
    if parametrization == 'nodewise':
        phi = np.atleast_2d(params.phi)
        Q = np.linalg.inv(np.atleast_2d(params.cov))
        prec = np.eye(d) / x0_var + phi.T @ Q @ phi
        H = x0_mean / x0_var + x1 @ (Q @ phi)
    else:
        C = params.cov @ params.phi
        prec = np.eye(N) / x0_var + params.phi.T @ C
        H = x0_mean / x0_var + C.T @ x1
    return prec, H


def sample_initial_state(x1, params, parametrization, x0_mean, x0_var, rng,
                         mean_only=False):
    """Draw x0 (N, d) from its full conditional."""
    prec, H = initial_state_system(x1, params, parametrization, x0_mean,
                                   x0_var)
    L = np.linalg.cholesky(prec)
    if parametrization == 'nodewise':
        mean = linalg.cho_solve((L, True), H.T).T
        if mean_only:
            return mean
        eps = rng.standard_normal(H.shape)
        return mean + linalg.solve_triangular(L, eps.T, lower=True,
                                              trans='T').T
    mean = linalg.cho_solve((L, True), H)
    if mean_only:
        return mean
    eps = rng.standard_normal(H.shape)
    return mean + linalg.solve_triangular(L, eps, lower=True, trans='T')
