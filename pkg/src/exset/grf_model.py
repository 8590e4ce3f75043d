"""Prior model of a vector-valued Gaussian random field.

Observations and predictions are indexed by *generalized locations*: a
spatial point paired with a response index.  Response indices are 0-based
throughout the code (``0`` is the first response, e.g. temperature).

On a grid, the flattened field is interleaved: entry ``cell * p + response``
where cells are numbered row-major from the south-west corner (x fastest).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NegativeDistance, OffGridLocation
from .gaussian_core import robust_cholesky


@dataclass(frozen=True)
class GeneralizedLocation:
    u: tuple
    response: int


class LocationBatch:
    """A batch of generalized locations: coordinates plus response indices."""

    def __init__(self, coords, responses):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        responses = np.atleast_1d(np.asarray(responses, dtype=int))
        if coords.shape[0] == 0:
            coords = coords.reshape(0, coords.shape[1] if coords.ndim == 2 else 2)
        if coords.shape[0] != responses.shape[0]:
            raise DimensionMismatch("coordinates and response indices differ in length")
        if not np.isfinite(coords).all():
            raise ValueError("coordinates must be finite")
        coords.setflags(write=False)
        responses.setflags(write=False)
        self.coords = coords
        self.responses = responses

    def __len__(self):
        return self.coords.shape[0]

    def __repr__(self):
        return f"LocationBatch(q={len(self)})"

    @classmethod
    def from_locations(cls, locations):
        locations = list(locations)
        if not locations:
            return cls.empty()
        return cls([loc.u for loc in locations], [loc.response for loc in locations])

    @classmethod
    def empty(cls, dim=2):
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=int))

    @classmethod
    def isotopic(cls, coords, p, responses=None):
        """Every listed response at every point, point-major ordering."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        responses = np.arange(p) if responses is None else np.asarray(responses, dtype=int)
        return cls(np.repeat(coords, len(responses), axis=0), np.tile(responses, len(coords)))

    def concat(self, other):
        return LocationBatch(np.vstack([self.coords, other.coords]),
                             np.concatenate([self.responses, other.responses]))

    def __iter__(self):
        for u, r in zip(self.coords, self.responses):
            yield GeneralizedLocation(tuple(u), int(r))


def matern32(h, eta):
    """Matérn 3/2 correlation ``(1 + eta h) exp(-eta h)``."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise NegativeDistance("distance must be non-negative")
    eh = eta * h
    return (1.0 + eh) * np.exp(-eh)


@dataclass(frozen=True)
class TrendModel:
    beta0: np.ndarray
    beta1: np.ndarray

    def __post_init__(self):
        b0 = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        b1 = np.atleast_2d(np.asarray(self.beta1, dtype=float))
        if b1.shape[0] != b0.shape[0]:
            raise DimensionMismatch("beta1 must have one row per response")
        if not (np.isfinite(b0).all() and np.isfinite(b1).all()):
            raise ValueError("trend coefficients must be finite")
        object.__setattr__(self, "beta0", b0)
        object.__setattr__(self, "beta1", b1)

    @property
    def p(self):
        return self.beta0.shape[0]

    def field(self, coords):
        """Trend at each point as an (n, p) array."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        return self.beta0 + coords @ self.beta1.T


def prior_mean(xs, trend):
    """Trend value ``(beta0 + beta1 u)[response]`` for each generalized location."""
    if len(xs) == 0:
        return np.zeros(0)
    return trend.field(xs.coords)[np.arange(len(xs)), xs.responses]


@dataclass(frozen=True)
class SeparableCovariance:
    """Spatial Matérn 3/2 kernel times a cross-response covariance."""

    sigma: np.ndarray
    gamma: np.ndarray
    eta: float

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.ndim == 0:
            g = float(gamma)
            gamma = np.full((len(sigma), len(sigma)), g)
            np.fill_diagonal(gamma, 1.0)
        if gamma.shape != (len(sigma), len(sigma)):
            raise DimensionMismatch("gamma must be p x p")
        if np.any(sigma <= 0):
            raise ValueError("standard deviations must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not np.allclose(gamma, gamma.T, atol=1e-12) or not np.allclose(np.diag(gamma), 1.0):
            raise ValueError("gamma must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(gamma)[0] < -1e-10:
            raise ValueError("gamma must be positive semi-definite")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "eta", float(self.eta))

    @property
    def p(self):
        return self.sigma.shape[0]

    @property
    def cross(self):
        """Response covariance matrix ``gamma_ij sigma_i sigma_j``."""
        return self.gamma * np.outer(self.sigma, self.sigma)


def _distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def prior_cov(xs, xs2, cov):
    """Prior covariance block between two batches of generalized locations."""
    if len(xs) == 0 or len(xs2) == 0:
        return np.zeros((len(xs), len(xs2)))
    spatial = matern32(_distances(xs.coords, xs2.coords), cov.eta)
    return spatial * cov.cross[np.ix_(xs.responses, xs2.responses)]


@dataclass(frozen=True)
class GridDomain:
    """Regular grid of cell centres over a rectangle ``(x0, x1, y0, y1)``."""

    nx: int = 31
    ny: int = 31
    extent: tuple = (0.0, 1.0, 0.0, 1.0)
    locations: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        x0, x1, y0, y1 = (float(v) for v in self.extent)
        if not (x1 > x0 and y1 > y0):
            raise ValueError("extent must have positive width and height")
        object.__setattr__(self, "extent", (x0, x1, y0, y1))
        xs = x0 + (np.arange(self.nx) + 0.5) * (x1 - x0) / self.nx
        ys = y0 + (np.arange(self.ny) + 0.5) * (y1 - y0) / self.ny
        gx, gy = np.meshgrid(xs, ys)
        locs = np.column_stack([gx.ravel(), gy.ravel()])
        locs.setflags(write=False)
        object.__setattr__(self, "locations", locs)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        x0, x1, y0, y1 = self.extent
        return (x1 - x0) * (y1 - y0) / self.size

    @property
    def spacing(self):
        x0, x1, y0, y1 = self.extent
        return (x1 - x0) / self.nx, (y1 - y0) / self.ny

    def nearest(self, u):
        """Index of the cell whose centre is closest to ``u``."""
        x0, x1, y0, y1 = self.extent
        dx, dy = self.spacing
        ix = int(np.clip(np.floor((u[0] - x0) / dx), 0, self.nx - 1))
        iy = int(np.clip(np.floor((u[1] - y0) / dy), 0, self.ny - 1))
        return iy * self.nx + ix

    def index_of(self, u, tol=1e-9):
        """Index of the cell centred exactly at ``u``."""
        idx = self.nearest(u)
        if np.hypot(*(self.locations[idx] - np.asarray(u, dtype=float))) > tol:
            raise OffGridLocation(f"{tuple(u)} is not a grid node")
        return idx

    def batch(self, p):
        """All grid generalized locations in interleaved order."""
        return LocationBatch.isotopic(self.locations, p)

    def field_index(self, cell, response, p):
        return cell * p + response


@dataclass(frozen=True)
class GrfPrior:
    trend: TrendModel
    cov: SeparableCovariance

    def __post_init__(self):
        if self.trend.p != self.cov.p:
            raise DimensionMismatch("trend and covariance disagree on the response count")

    @property
    def p(self):
        return self.cov.p

    def mean(self, xs):
        return prior_mean(xs, self.trend)

    def covariance(self, xs, xs2=None):
        return prior_cov(xs, xs if xs2 is None else xs2, self.cov)


def sample_truth(prior, grid, seed):
    """One joint draw of the field on the grid, returned as (N, p).

    Uses the separable structure: the Cholesky factor of the full covariance
    is the Kronecker product of the spatial and response factors.
    """
    spatial = matern32(_distances(grid.locations, grid.locations), prior.cov.eta)
    ls = robust_cholesky(spatial).factor
    lr = robust_cholesky(prior.cov.cross).factor
    z = np.random.default_rng(seed).standard_normal((grid.size, prior.p))
    return prior.trend.field(grid.locations) + ls @ z @ lr.T
