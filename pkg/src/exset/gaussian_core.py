"""Multivariate Gaussian CDFs, factorisation and sampling.

Orthant probabilities are dispatched on dimension: the error function in
one dimension, Drezner-Wesolowsky/Genz quadrature in two, and a randomised
rank-1 lattice rule over Genz's separation-of-variables integrand (with
variable prioritisation) from three dimensions on.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from . import kernels
from .errors import DimensionCap, DimensionMismatch, NotPsd

MAX_DIM = 24
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59,
           61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131)


@dataclass(frozen=True)
class QmcConfig:
    """Randomised lattice settings.

    ``sample_count`` is the total number of integrand evaluations, split
    evenly over ``randomization_count`` independent random shifts whose
    spread gives the standard error.
    """

    sample_count: int = 4096
    seed: int = 0
    randomization_count: int = 16

    def __post_init__(self):
        if self.sample_count < 128:
            raise ValueError("sample_count must be at least 128")
        if self.randomization_count < 8:
            raise ValueError("randomization_count must be at least 8")
        if self.sample_count < self.randomization_count:
            raise ValueError("sample_count must exceed randomization_count")

    @property
    def points_per_shift(self):
        return self.sample_count // self.randomization_count


DEFAULT_QMC = QmcConfig()


@dataclass(frozen=True)
class CholeskyResult:
    factor: np.ndarray
    jitter: float


@lru_cache(maxsize=64)
def _lattice(dim, seed, n_shift):
    alpha = np.sqrt(np.asarray(_PRIMES[:dim], dtype=float)) % 1.0
    shifts = np.random.default_rng(seed).random((n_shift, dim))
    alpha.setflags(write=False)
    shifts.setflags(write=False)
    return alpha, shifts


def as_covariance(cov, dim=None):
    """Validate a covariance matrix and return it as a float array."""
    cov = np.array(cov, dtype=float, ndmin=2)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got shape {cov.shape}")
    if dim is not None and cov.shape[0] != dim:
        raise DimensionMismatch(f"expected a {dim}x{dim} covariance, got {cov.shape}")
    scale = max(np.abs(cov).max(), 1e-300)
    if np.abs(cov - cov.T).max() > 1e-12 * scale:
        raise NotPsd("covariance matrix is not symmetric")
    return 0.5 * (cov + cov.T)


def _psd_jitter(cov):
    """Smallest ladder jitter making ``cov`` PSD, 0.0 if already PSD."""
    trace = float(np.trace(cov))
    if cov.size == 0:
        return 0.0
    min_eig = float(np.linalg.eigvalsh(cov)[0])
    if min_eig >= -1e-10 * max(trace, 0.0):
        return 0.0
    for step in JITTER_LADDER:
        if trace > 0 and min_eig + step * trace >= 0.0:
            return step * trace
    raise NotPsd(f"covariance is not positive semi-definite (min eigenvalue {min_eig:.3g})")


def robust_cholesky(cov):
    """Lower Cholesky factor with escalating diagonal jitter.

    Jitter starts at ``1e-10 * trace`` and grows tenfold up to
    ``1e-6 * trace``; the returned factor reconstructs ``cov + jitter * I``.
    """
    cov = as_covariance(cov)
    n = cov.shape[0]
    trace = float(np.trace(cov))
    if n == 0:
        return CholeskyResult(np.zeros((0, 0)), 0.0)
    if trace == 0.0 and not cov.any():
        return CholeskyResult(np.zeros_like(cov), 0.0)
    try:
        return CholeskyResult(np.linalg.cholesky(cov), 0.0)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(n)
    for step in JITTER_LADDER:
        jitter = step * trace
        try:
            return CholeskyResult(np.linalg.cholesky(cov + jitter * eye), jitter)
        except np.linalg.LinAlgError:
            continue
    raise NotPsd("Cholesky failed after the full jitter ladder")


def _orthant_1d(upper, cov):
    sd = np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
    b = upper[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(sd > 0, ndtr(b / np.where(sd > 0, sd, 1.0)), (b >= 0).astype(float))
    return p, np.zeros_like(p)


def _orthant_2d(upper, cov):
    v1, v2, c12 = cov[:, 0, 0], cov[:, 1, 1], cov[:, 0, 1]
    tr = np.maximum(v1 + v2, 1e-300)
    s1 = np.sqrt(np.maximum(v1, 0.0))
    s2 = np.sqrt(np.maximum(v2, 0.0))
    deg1 = v1 <= 1e-14 * tr
    deg2 = v2 <= 1e-14 * tr
    ok = ~(deg1 | deg2)
    p = np.zeros(len(upper))
    if ok.any():
        h = upper[ok, 0] / s1[ok]
        k = upper[ok, 1] / s2[ok]
        r = np.clip(c12[ok] / (s1[ok] * s2[ok]), -1.0, 1.0)
        p[ok] = kernels.bvn_lower(np.ascontiguousarray(h), np.ascontiguousarray(k),
                                  np.ascontiguousarray(r))
    if (~ok).any():
        # a zero-variance margin is a constant: the event factorises
        with np.errstate(divide="ignore", invalid="ignore"):
            m1 = np.where(deg1, (upper[:, 0] >= 0).astype(float),
                          ndtr(upper[:, 0] / np.where(deg1, 1.0, s1)))
            m2 = np.where(deg2, (upper[:, 1] >= 0).astype(float),
                          ndtr(upper[:, 1] / np.where(deg2, 1.0, s2)))
        p[~ok] = (m1 * m2)[~ok]
    return p, np.zeros_like(p)


def _orthant_qmc(upper, cov, cfg):
    d = upper.shape[1]
    alpha, shifts = _lattice(d, cfg.seed, cfg.randomization_count)
    prob, err, status = kernels.orthant_qmc(
        np.ascontiguousarray(cov), np.ascontiguousarray(upper), alpha, shifts,
        cfg.points_per_shift,
    )
    flagged = np.flatnonzero(status)
    for idx in flagged:
        trace = float(np.trace(cov[idx]))
        for step in JITTER_LADDER:
            c = cov[idx] + step * trace * np.eye(d)
            p, e, s = kernels.orthant_qmc(c[None], upper[idx][None].copy(), alpha, shifts,
                                          cfg.points_per_shift)
            if not s[0]:
                prob[idx], err[idx] = p[0], e[0]
                break
        else:
            raise NotPsd("orthant covariance is not positive semi-definite")
    return np.clip(prob, 0.0, 1.0), err


def _orthant_dense(upper, cov, cfg):
    d = upper.shape[1]
    if d == 1:
        return _orthant_1d(upper, cov)
    if d == 2:
        return _orthant_2d(upper, cov)
    return _orthant_qmc(upper, cov, cfg)


def orthant_batch(upper, cov, cfg=None):
    """Centred orthant probabilities ``P(X_i <= upper_i)`` for a batch.

    Parameters
    ----------
    upper : (B, d) array
        Bounds; ``+inf`` leaves a margin unconstrained, ``-inf`` gives 0.
    cov : (B, d, d) array
        Covariance of each centred Gaussian vector.
    cfg : QmcConfig, optional
        Lattice settings for ``d >= 3``.

    Returns
    -------
    prob, stderr : (B,) arrays
    """
    cfg = cfg or DEFAULT_QMC
    upper = np.asarray(upper, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if upper.ndim != 2 or cov.ndim != 3 or cov.shape != upper.shape + upper.shape[-1:]:
        raise DimensionMismatch(f"bounds {upper.shape} and covariances {cov.shape} disagree")
    n, d = upper.shape
    if d > MAX_DIM:
        raise DimensionCap(f"dimension {d} exceeds cap {MAX_DIM}")
    prob = np.zeros(n)
    err = np.zeros(n)
    if n == 0:
        return prob, err
    if d == 0:
        return np.ones(n), err
    dead = np.isneginf(upper).any(axis=1)
    free = np.isposinf(upper)
    live = ~dead
    if not free[live].any():
        p, e = _orthant_dense(upper[live], cov[live], cfg)
        prob[live], err[live] = p, e
        return prob, err
    # drop unconstrained margins: group instances by which margins remain
    keys = np.packbits(~free, axis=1)
    for key in np.unique(keys[live], axis=0):
        rows = np.flatnonzero(live & (keys == key).all(axis=1))
        keep = ~free[rows[0]]
        if not keep.any():
            prob[rows] = 1.0
            continue
        sub_u = upper[np.ix_(rows, keep)]
        sub_c = cov[rows][:, keep][:, :, keep]
        p, e = _orthant_dense(sub_u, sub_c, cfg)
        prob[rows], err[rows] = p, e
    return prob, err


def mvn_cdf(upper, mean, cov, cfg=None):
    """``P(N <= upper)`` for ``N ~ Normal(mean, cov)``.

    Returns ``(probability, std_error)``; the error is zero for the exact
    one- and two-dimensional paths.
    """
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if upper.ndim != 1 or mean.shape != upper.shape:
        raise DimensionMismatch(f"bounds {upper.shape} and mean {mean.shape} disagree")
    cov = as_covariance(cov, dim=upper.shape[0])
    jitter = _psd_jitter(cov)
    if jitter:
        cov = cov + jitter * np.eye(len(cov))
    with np.errstate(invalid="ignore"):
        shifted = upper - mean
    p, e = orthant_batch(shifted[None, :], cov[None], cfg)
    return float(p[0]), float(e[0])


def mvn_sample(mean, cov, n, seed):
    """``n`` reproducible draws from ``Normal(mean, cov)`` as an (n, d) array."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = as_covariance(cov, dim=mean.shape[0])
    factor = robust_cholesky(cov).factor
    z = np.random.default_rng(seed).standard_normal((int(n), mean.shape[0]))
    return mean + z @ factor.T
