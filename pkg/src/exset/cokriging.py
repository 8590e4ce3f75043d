"""Co-Kriging on generalized locations.

The posterior is held on the grid as a dense mean vector and covariance
matrix (interleaved ``cell * p + response`` ordering).  Observations may sit
anywhere in the domain; covariances between off-grid observation points and
the grid are obtained from the prior kernel and the assimilated history.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch, NotPsd, SingularSystem
from .gaussian_core import JITTER_LADDER, as_covariance
from .grf_model import LocationBatch, matern32, _distances


class ObservationBatch:
    """Values ``z`` observed at generalized locations ``xs`` with noise ``Δ``."""

    def __init__(self, xs, values, noise):
        values = np.atleast_1d(np.asarray(values, dtype=float))
        q = len(xs)
        noise = np.asarray(noise, dtype=float)
        if noise.ndim == 1:
            noise = np.diag(noise)
        if noise.ndim == 0:
            noise = np.eye(q) * float(noise)
        if values.shape != (q,) or noise.shape != (q, q):
            raise DimensionMismatch(
                f"batch of {q} locations got values {values.shape} and noise {noise.shape}")
        if q and not np.isfinite(values).all():
            raise ValueError("observed values must be finite")
        if q:
            noise = as_covariance(noise)
            if np.linalg.eigvalsh(noise)[0] < -1e-10 * max(np.trace(noise), 1e-300):
                raise NotPsd("noise covariance is not positive semi-definite")
        values.setflags(write=False)
        noise.setflags(write=False)
        self.xs = xs
        self.values = values
        self.noise = noise

    def __len__(self):
        return len(self.xs)

    def __repr__(self):
        return f"ObservationBatch(q={len(self)})"


def _factor(mat, scale):
    """Cholesky of a PSD system with jitter relative to ``scale``."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(len(mat))
    for step in JITTER_LADDER:
        try:
            return np.linalg.cholesky(mat + step * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise SingularSystem("co-Kriging system is singular beyond the jitter ladder")


def _block_diag(mats):
    n = sum(len(m) for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        k = len(m)
        out[i:i + k, i:i + k] = m
        i += k
    return out


def _concat(batches):
    if not batches:
        return LocationBatch.empty(), np.zeros(0), np.zeros((0, 0))
    xs = batches[0].xs
    for b in batches[1:]:
        xs = xs.concat(b.xs)
    return (xs, np.concatenate([b.values for b in batches]),
            _block_diag([b.noise for b in batches]))


class _GridKernel:
    """Prior quantities on a grid, shared by all states built on it."""

    def __init__(self, prior, grid):
        self.prior = prior
        self.grid = grid
        self.p = prior.p
        self.batch = grid.batch(prior.p)
        self.mean = prior.mean(self.batch)
        spatial = matern32(_distances(grid.locations, grid.locations), prior.cov.eta)
        self.cov = np.kron(spatial, prior.cov.cross)

    def cross(self, xs):
        """Prior covariance k(xs, grid), shape (q, N p)."""
        if len(xs) == 0:
            return np.zeros((0, len(self.mean)))
        spatial = matern32(_distances(xs.coords, self.grid.locations), self.prior.cov.eta)
        resp = self.prior.cov.cross[xs.responses]          # (q, p)
        return (spatial[:, :, None] * resp[:, None, :]).reshape(len(xs), -1)


class PosteriorState:
    """Immutable co-Kriging posterior over the grid.

    Attributes
    ----------
    grid : GridDomain
    prior : GrfPrior
    mean : (N p,) array
    cov : (N p, N p) array
    history : tuple of ObservationBatch
    """

    def __init__(self, kernel, mean, cov, history):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        mean.setflags(write=False)
        cov.setflags(write=False)
        self._kernel = kernel
        self.mean = mean
        self.cov = cov
        self.history = tuple(history)
        self._hist = None

    grid = property(lambda self: self._kernel.grid)
    prior = property(lambda self: self._kernel.prior)
    p = property(lambda self: self._kernel.p)

    def __repr__(self):
        return f"PosteriorState(N={self.grid.size}, p={self.p}, batches={len(self.history)})"

    @property
    def n_obs(self):
        return sum(len(b) for b in self.history)

    def _history_system(self):
        # lazily factor k(X, X) + Δ for all assimilated observations
        if self._hist is None:
            xs, z, noise = _concat(self.history)
            if len(xs):
                a = self.prior.covariance(xs) + noise
                chol = _factor(a, max(np.trace(a), 1e-300) / len(a))
                resid = z - self.prior.mean(xs)
                alpha = cho_solve((chol, True), resid)
            else:
                chol = np.zeros((0, 0))
                alpha = np.zeros(0)
            self._hist = (xs, chol, alpha)
        return self._hist

    def predictive(self, xs):
        """Posterior mean and covariance at arbitrary generalized locations.

        Returns
        -------
        mean : (q,) array
        cov : (q, q) array
            ``k_n(xs, xs)``.
        cross : (q, N p) array
            ``k_n(xs, grid)``.
        """
        k = self._kernel
        cross = k.cross(xs)
        mean = self.prior.mean(xs)
        cov = self.prior.covariance(xs)
        hx, chol, alpha = self._history_system()
        if len(hx) and len(xs):
            kxh = self.prior.covariance(xs, hx)
            w = solve_triangular(chol, kxh.T, lower=True)     # L^-1 k(X, xs)
            hg = k.cross(hx)
            wg = solve_triangular(chol, hg, lower=True)
            cross = cross - w.T @ wg
            cov = cov - w.T @ w
            mean = mean + kxh @ alpha
        return mean, 0.5 * (cov + cov.T), cross

    def marginals(self):
        """Per-cell mean (N, p) and covariance blocks (N, p, p)."""
        n, p = self.grid.size, self.p
        idx = np.arange(n)[:, None] * p + np.arange(p)[None, :]
        blocks = self.cov[idx[:, :, None], idx[:, None, :]]
        return self.mean.reshape(n, p), blocks


@dataclass(frozen=True)
class Gain:
    """Quantities of a hypothetical or actual assimilation of one batch."""

    pred_mean: np.ndarray      # mu_n(x), (q,)
    pred_cov: np.ndarray       # k_n(x, x) + noise, (q, q)
    cross: np.ndarray          # k_n(x, grid), (q, N p)
    weights: np.ndarray        # (k_n(x, x) + noise)^-1 k_n(x, grid), (q, N p)
    chol: np.ndarray           # Cholesky factor of pred_cov


def gain(state, xs, noise):
    """Kriging weights for assimilating observations at ``xs`` into ``state``."""
    mean_x, cov_x, cross = state.predictive(xs)
    s = cov_x + noise
    scale = max(np.trace(state.prior.covariance(xs) + noise) / max(len(xs), 1), 1e-300)
    chol = _factor(s, scale)
    weights = cho_solve((chol, True), cross)
    return Gain(mean_x, s, cross, weights, chol)


def prior_state(prior, grid):
    """Posterior before any data: the prior discretized on ``grid``."""
    k = _GridKernel(prior, grid)
    return PosteriorState(k, k.mean, k.cov, ())


def condition_batch(prior, grid, batches, base=None):
    """One-shot co-Kriging on all ``batches``.

    ``base`` may be a prior state on the same grid to reuse its prior
    covariance matrix.
    """
    base = base or prior_state(prior, grid)
    if base.history:
        raise ValueError("base must be a prior state")
    k = base._kernel
    batches = [b for b in batches if len(b)]
    xs, z, noise = _concat(batches)
    if not len(xs):
        return base
    a = prior.covariance(xs) + noise
    chol = _factor(a, max(np.trace(a), 1e-300) / len(a))
    kxg = k.cross(xs)
    w = solve_triangular(chol, kxg, lower=True)
    resid = solve_triangular(chol, z - prior.mean(xs), lower=True)
    mean = k.mean + w.T @ resid
    cov = k.cov - w.T @ w
    return PosteriorState(k, mean, 0.5 * (cov + cov.T), batches)


def update(state, batch):
    """Assimilate one batch with the sequential co-Kriging update."""
    if len(batch) == 0:
        return state
    g = gain(state, batch.xs, batch.noise)
    mean = state.mean + g.weights.T @ (batch.values - g.pred_mean)
    cov = state.cov - g.cross.T @ g.weights
    return PosteriorState(state._kernel, mean, 0.5 * (cov + cov.T),
                          state.history + (batch,))


def posterior_marginal(state, u):
    """Mean p-vector and p x p covariance at the grid node ``u``."""
    cell = state.grid.index_of(u)
    p = state.p
    sl = slice(cell * p, (cell + 1) * p)
    return state.mean[sl].copy(), state.cov[sl, sl].copy()
