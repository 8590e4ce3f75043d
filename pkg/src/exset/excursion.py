"""Excursion-set uncertainty functionals.

The target set is an orthant: each response is required to lie below (or
above) its threshold.  ``above`` margins are handled by negating them, so
every probability reduces to a lower orthant ``P(X <= a)`` of a centred
Gaussian vector.
"""
from collections import Counter
from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import factorial

import numpy as np

from .errors import DimensionCap, DimensionMismatch
from .gaussian_core import MAX_DIM, orthant_batch

MAX_MOMENT = 3
EMV_MAX_NODES = 225


@dataclass(frozen=True)
class ExcursionSpec:
    """Per-response thresholds and orientations (``"below"`` or ``"above"``)."""

    thresholds: tuple
    orientation: tuple = None

    def __post_init__(self):
        t = tuple(float(v) for v in np.atleast_1d(self.thresholds))
        orient = self.orientation
        if orient is None:
            orient = ("below",) * len(t)
        elif isinstance(orient, str):
            orient = (orient,) * len(t)
        orient = tuple(orient)
        if len(orient) != len(t):
            raise DimensionMismatch("one orientation per threshold is required")
        if any(o not in ("below", "above") for o in orient):
            raise ValueError("orientation must be 'below' or 'above'")
        if any(np.isnan(v) for v in t):
            raise ValueError("thresholds must not be NaN")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "orientation", orient)

    @property
    def p(self):
        return len(self.thresholds)

    @property
    def signs(self):
        return np.array([1.0 if o == "below" else -1.0 for o in self.orientation])


def oriented_bounds(spec, mean):
    """Upper bounds ``s * (t - mean)`` of the centred lower-orthant problem."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape[-1] != spec.p:
        raise DimensionMismatch(f"mean has {mean.shape[-1]} responses, spec has {spec.p}")
    with np.errstate(invalid="ignore"):
        return spec.signs * (np.asarray(spec.thresholds) - mean)


def oriented_cov(spec, cov):
    """Covariance of the sign-flipped vector ``s * X``."""
    s = spec.signs
    return cov * s[..., :, None] * s[..., None, :]


def default_weights(grid):
    """Cell-area measure: every cell carries weight ``δ``."""
    return np.full(grid.size, grid.cell_area)


def _weights(state, weights):
    if weights is None:
        return default_weights(state.grid)
    w = np.asarray(weights, dtype=float)
    if w.shape != (state.grid.size,):
        raise DimensionMismatch(f"weights must have length {state.grid.size}")
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    return w


def ep_field(state, spec, cfg=None):
    """Excursion probability at every grid cell."""
    mean, cov = state.marginals()
    prob, _ = orthant_batch(oriented_bounds(spec, mean), oriented_cov(spec, cov), cfg)
    return prob


def excursion_probability(state, u, spec, cfg=None):
    """Excursion probability at the grid node ``u``."""
    cell = state.grid.index_of(u)
    p = state.p
    sl = slice(cell * p, (cell + 1) * p)
    mean, cov = state.mean[sl], state.cov[sl, sl]
    prob, _ = orthant_batch(oriented_bounds(spec, mean)[None], oriented_cov(spec, cov)[None], cfg)
    return float(prob[0])


def bernoulli_variance(prob):
    prob = np.asarray(prob, dtype=float)
    return prob * (1.0 - prob)


def bernoulli_variance_field(state, spec, cfg=None):
    """``p(1 - p)`` at every grid cell."""
    return bernoulli_variance(ep_field(state, spec, cfg))


def ibv(state, spec, weights=None, cfg=None):
    """Integrated Bernoulli variance ``sum_u w(u) p(u) (1 - p(u))``."""
    w = _weights(state, weights)
    return float(w @ bernoulli_variance_field(state, spec, cfg))


def block_subsample(grid, weights, stride):
    """Keep every ``stride``-th cell per axis, each carrying its block's weight."""
    if stride <= 1:
        return np.arange(grid.size), weights
    ix = np.arange(grid.size) % grid.nx
    iy = np.arange(grid.size) // grid.nx
    rep = (iy // stride * stride) * grid.nx + (ix // stride * stride)
    cells = np.unique(rep)
    agg = np.zeros(grid.size)
    np.add.at(agg, rep, weights)
    return cells, agg[cells]


def stride_subsample(grid, weights, max_nodes=EMV_MAX_NODES):
    """Representative cells and aggregated weights for double/triple sums.

    Uses the smallest stride leaving at most ``max_nodes`` cells.  Each kept
    cell carries the weight of its block, which treats every block as
    perfectly correlated and so biases the result upwards.
    """
    stride = 1
    while -(-grid.nx // stride) * -(-grid.ny // stride) > max_nodes:
        stride += 1
    return block_subsample(grid, weights, stride)


def _joint(state, spec, cells_sets, cfg):
    """Joint excursion probability of each set of cells (all the same size)."""
    p = state.p
    sets = np.asarray(cells_sets)
    k = sets.shape[1]
    idx = (sets[:, :, None] * p + np.arange(p)).reshape(len(sets), k * p)
    mean = state.mean[idx]
    cov = state.cov[idx[:, :, None], idx[:, None, :]]
    s = np.tile(spec.signs, k)
    upper = s * (np.tile(spec.thresholds, k) - mean)
    return orthant_batch(upper, cov * s[:, None] * s[None, :], cfg)


def excursion_moment(state, spec, weights=None, r=1, cfg=None, max_nodes=EMV_MAX_NODES):
    """``E[nu(Γ)^r]`` as an r-fold grid sum of joint excursion probabilities.

    Tuples with repeated cells reduce to the joint probability of their
    distinct cells.  Grids above ``max_nodes`` cells are stride-subsampled.
    """
    if int(r) != r or r < 1:
        raise ValueError("moment order must be a positive integer")
    r = int(r)
    if r > MAX_MOMENT or r * state.p > MAX_DIM:
        raise DimensionCap(f"moment order {r} with p={state.p} exceeds the cap")
    w = _weights(state, weights)
    cells, w = stride_subsample(state.grid, w, max_nodes)
    total = 0.0
    groups = {}
    for combo in combinations_with_replacement(range(len(cells)), r):
        counts = Counter(combo)
        mult = factorial(r)
        for c in counts.values():
            mult //= factorial(c)
        coef = mult * np.prod(w[list(combo)])
        if coef == 0.0:
            continue
        groups.setdefault(len(counts), []).append((tuple(cells[list(counts)]), coef))
    for items in groups.values():
        sets = [it[0] for it in items]
        coefs = np.array([it[1] for it in items])
        prob, _ = _joint(state, spec, sets, cfg)
        total += float(coefs @ prob)
    return total


def emv(state, spec, weights=None, cfg=None, max_nodes=EMV_MAX_NODES):
    """Variance of the excursion volume ``nu(Γ)``.

    Not clipped at zero, so tiny negative values can appear within the
    lattice-rule error.
    """
    m1 = excursion_moment(state, spec, weights, 1, cfg, max_nodes)
    m2 = excursion_moment(state, spec, weights, 2, cfg, max_nodes)
    return m2 - m1 * m1
