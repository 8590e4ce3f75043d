"""Expected uncertainty reduction criteria.

Both criteria follow from one identity: if ``V ~ N(0, C_V)`` then

    E[Φ(a + B V; C)^h] = Φ_{ph}(1_h ⊗ a; 1_h 1_hᵀ ⊗ B C_V Bᵀ + I_h ⊗ C),

and its product form for several CDF factors.  The expected IBV after a
candidate batch is a sum of such terms with ``h = 2`` over grid nodes, the
expected EMV a double sum with ``h = (1, 1)``.
"""
from dataclasses import dataclass

import numpy as np

from .cokriging import gain
from .errors import DimensionCap, DimensionMismatch, GridTooLarge, NotPsd
from .excursion import EMV_MAX_NODES, _weights, excursion_moment, oriented_bounds
from .gaussian_core import MAX_DIM, as_covariance, mvn_cdf, orthant_batch

# a node whose expected covariance drop is this small relative to its
# variance is treated as untouched by the design
_NO_INFO = 1e-9
_NO_UNCERTAINTY = 1e-12


def _check_psd(mat, name):
    mat = as_covariance(mat)
    if mat.size and np.linalg.eigvalsh(mat)[0] < -1e-10 * max(np.trace(mat), 1e-300):
        raise NotPsd(f"{name} is not positive semi-definite")
    return mat


def expected_phi_product(terms, c_v, cfg=None, return_error=False):
    """``E[prod_i Φ(a_i + B_i V; C_i)^h_i]`` for ``V ~ N(0, c_v)``.

    Parameters
    ----------
    terms : sequence of (a, B, C, h)
        ``a`` is a p_i-vector, ``B`` a p_i x q matrix, ``C`` a p_i x p_i
        covariance and ``h`` a positive integer power.
    c_v : (q, q) array
    cfg : QmcConfig, optional
    return_error : bool
        Also return the lattice-rule standard error.
    """
    c_v = _check_psd(np.atleast_2d(c_v), "C_V")
    q = c_v.shape[0]
    uppers, rows, diag_blocks = [], [], []
    for a, b, c, h in terms:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float).reshape(len(a), -1)
        c = _check_psd(np.atleast_2d(c), "C")
        h = int(h)
        if h < 1:
            raise ValueError("powers must be positive")
        if b.shape[1] != q or c.shape != (len(a), len(a)):
            raise DimensionMismatch("term shapes disagree with C_V")
        uppers.append(np.tile(a, h))
        rows.append(np.tile(b, (h, 1)))
        diag_blocks.append(np.kron(np.eye(h), c))
    upper = np.concatenate(uppers)
    dim = len(upper)
    if dim > MAX_DIM:
        raise DimensionCap(f"dimension {dim} exceeds cap {MAX_DIM}")
    bigb = np.vstack(rows)
    sigma = bigb @ c_v @ bigb.T
    i = 0
    for blk in diag_blocks:
        k = len(blk)
        sigma[i:i + k, i:i + k] += blk
        i += k
    prob, err = mvn_cdf(upper, np.zeros(dim), 0.5 * (sigma + sigma.T), cfg)
    return (prob, err) if return_error else prob


def expected_phi_power(a, b, c, c_v, h, cfg=None, return_error=False):
    """``E[Φ_p(a + B V; C)^h]`` for ``V ~ N(0, c_v)``."""
    return expected_phi_product([(a, b, c, h)], c_v, cfg, return_error)


@dataclass(frozen=True)
class CandidateDesign:
    """A candidate batch of generalized locations with its noise covariance."""

    xs: object
    noise: np.ndarray

    def __post_init__(self):
        noise = np.asarray(self.noise, dtype=float)
        q = len(self.xs)
        if q < 1:
            raise ValueError("a design needs at least one location")
        if noise.ndim == 0:
            noise = np.eye(q) * float(noise)
        elif noise.ndim == 1:
            noise = np.diag(noise)
        if noise.shape != (q, q):
            raise DimensionMismatch("noise must be q x q")
        object.__setattr__(self, "noise", _check_psd(noise, "noise"))


@dataclass(frozen=True)
class EibvBreakdown:
    current_ibv: float
    expected_ibv: float
    per_node_terms: np.ndarray
    stderr: float = 0.0


def node_terms(mean, cov, drop, spec, cfg=None):
    """Expected Bernoulli variance per node after a design.

    Parameters
    ----------
    mean, cov : (N, p), (N, p, p)
        Current node marginals.
    drop : (N, p, p)
        Expected covariance reduction ``K_n - K_{n+1}`` at each node.

    Returns
    -------
    current, expected, stderr : (N,) arrays
        Current ``p(1 - p)``, expected ``E[p'(1 - p')]`` and its error.
    """
    s = spec.signs
    flip = s[:, None] * s[None, :]
    a = oriented_bounds(spec, mean)
    k = cov * flip
    d = drop * flip
    prob, _ = orthant_batch(a, k, cfg)
    current = prob * (1.0 - prob)
    expected = current.copy()
    err = np.zeros_like(prob)
    n, p = a.shape
    var = np.abs(np.diagonal(k, axis1=1, axis2=2)).max(axis=1)
    informed = np.abs(d).reshape(n, -1).max(axis=1) > _NO_INFO * var
    live = np.flatnonzero(informed & (current > _NO_UNCERTAINTY))
    if live.size:
        big = np.empty((live.size, 2 * p, 2 * p))
        big[:, :p, :p] = k[live]
        big[:, p:, p:] = k[live]
        big[:, :p, p:] = d[live]
        big[:, p:, :p] = np.swapaxes(d[live], 1, 2)
        upper = np.concatenate([a[live], a[live]], axis=1)
        second, e = orthant_batch(upper, big, cfg)
        expected[live] = np.maximum(prob[live] - second, 0.0)
        err[live] = e
    return current, expected, err


def covariance_drop(g, p):
    """Per-node ``λᵀ (k_n(x, x) + Δ) λ`` from a :class:`~exset.cokriging.Gain`."""
    q = g.cross.shape[0]
    cross = g.cross.reshape(q, -1, p)
    weights = g.weights.reshape(q, -1, p)
    return np.einsum("qni,qnj->nij", cross, weights)


def eibv(state, design, spec, weights=None, cfg=None):
    """Expected integrated Bernoulli variance after observing ``design``."""
    w = _weights(state, weights)
    g = gain(state, design.xs, design.noise)
    mean, cov = state.marginals()
    cur, exp, err = node_terms(mean, cov, covariance_drop(g, state.p), spec, cfg)
    return EibvBreakdown(float(w @ cur), float(w @ exp), w * exp,
                         float(np.sqrt(np.sum((w * err) ** 2))))


def eemv(state, design, spec, weights=None, cfg=None, max_nodes=EMV_MAX_NODES):
    """Expected excursion-volume variance after observing ``design``."""
    n = state.grid.size
    if n > max_nodes:
        raise GridTooLarge(f"expected EMV needs a grid of at most {max_nodes} cells, got {n}")
    w = _weights(state, weights)
    g = gain(state, design.xs, design.noise)
    p = state.p
    second = excursion_moment(state, spec, w, 2, cfg, max_nodes)
    # E[p'(u) p'(v)]: current margins, cross block λ(u)ᵀ S λ(v)
    q = g.cross.shape[0]
    cross = g.cross.reshape(q, n, p)
    wts = g.weights.reshape(q, n, p)
    s = spec.signs
    mean, cov = state.marginals()
    a = oriented_bounds(spec, mean)
    k = cov * s[:, None] * s[None, :]
    iu, ju = np.triu_indices(n)
    coef = np.where(iu == ju, 1.0, 2.0) * w[iu] * w[ju]
    keep = coef > 0
    iu, ju, coef = iu[keep], ju[keep], coef[keep]
    total = 0.0
    chunk = 4096
    for lo in range(0, len(iu), chunk):
        i, j = iu[lo:lo + chunk], ju[lo:lo + chunk]
        d = np.einsum("qbi,qbj->bij", cross[:, i], wts[:, j]) * s[:, None] * s[None, :]
        big = np.empty((len(i), 2 * p, 2 * p))
        big[:, :p, :p] = k[i]
        big[:, p:, p:] = k[j]
        big[:, :p, p:] = d
        big[:, p:, :p] = np.swapaxes(d, 1, 2)
        prob, _ = orthant_batch(np.concatenate([a[i], a[j]], axis=1), big, cfg)
        total += float(coef[lo:lo + chunk] @ prob)
    return second - total

