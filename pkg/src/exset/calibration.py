"""Model calibration from survey data.

Workflow: ordinary least squares trend on ``(1, x, y)`` per response,
Pearson correlation of the residuals, classical (Matheron) variogram per
response, weighted least-squares Matérn 3/2 fit and a chi-square check of
the standardized residual pairs.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import FitDiverged, InsufficientData, RankDeficient, SchemaError, SingularCovariance
from .grf_model import SeparableCovariance, TrendModel, matern32

COLUMNS = ("t", "x", "y", "depth", "temperature", "salinity")
RESPONSES = ("temperature", "salinity")
MIN_ROWS = 30
# (1 + x) exp(-x) = 0.05
EFFECTIVE_RANGE_FACTOR = 4.743864518390577


@dataclass(frozen=True)
class SurveyDataset:
    t: np.ndarray
    positions: np.ndarray
    depth: np.ndarray
    values: np.ndarray
    source: str = ""

    def __len__(self):
        return len(self.t)


def load_survey_csv(path):
    """Read a survey CSV with header ``t,x,y,depth,temperature,salinity``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError("empty file", 1)
        if tuple(h.strip() for h in header) != COLUMNS:
            raise SchemaError(f"expected header {','.join(COLUMNS)}", 1)
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(COLUMNS):
                raise SchemaError(f"expected {len(COLUMNS)} fields, got {len(rec)}", line)
            try:
                vals = [float(c) for c in rec]
            except ValueError:
                raise SchemaError("non-numeric field", line) from None
            if not all(math.isfinite(v) for v in vals):
                raise SchemaError("non-finite value", line)
            if rows and vals[0] < rows[-1][0]:
                raise SchemaError("timestamps must be non-decreasing", line)
            rows.append(vals)
    if len(rows) < MIN_ROWS:
        raise InsufficientData(f"need at least {MIN_ROWS} rows, got {len(rows)}")
    arr = np.array(rows)
    return SurveyDataset(arr[:, 0], arr[:, 1:3], arr[:, 3], arr[:, 4:6], str(path))


def fit_trend(positions, values):
    """Per-response OLS of ``values`` on ``(1, x, y)``.

    Returns
    -------
    trend : TrendModel
    residuals : (n, p) array
    """
    positions = np.asarray(positions, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    design = np.column_stack([np.ones(len(positions)), positions])
    if len(design) < design.shape[1] or np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficient("trend design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    resid = values - design @ coef
    return TrendModel(coef[0], coef[1:].T), resid


def residual_cross_corr(residuals):
    """Pearson correlation of two residual series and their variances."""
    residuals = np.asarray(residuals, dtype=float)
    if len(residuals) < MIN_ROWS:
        raise InsufficientData(f"need at least {MIN_ROWS} residual pairs")
    var = residuals.var(axis=0, ddof=1)
    if np.any(var == 0):
        return float("nan"), var
    return float(np.corrcoef(residuals[:, 0], residuals[:, 1])[0, 1]), var


@dataclass(frozen=True)
class Variogram:
    """Binned semivariances; ``values[b, l]`` for bin ``b`` and response ``l``."""

    edges: np.ndarray
    lags: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    @property
    def empty(self):
        return self.counts == 0


def default_bins(positions, n_bins=15):
    """Equal-width bins up to half the data's bounding-box diagonal."""
    span = np.ptp(np.asarray(positions, dtype=float), axis=0)
    max_lag = 0.5 * float(np.hypot(*span))
    if max_lag <= 0:
        raise InsufficientData("all positions coincide")
    return np.linspace(0.0, max_lag, n_bins + 1)


def empirical_variogram(residuals, positions, bins=None):
    """Matheron estimator ``sum (r_i - r_j)^2 / (2 N(h))`` per lag bin.

    Empty bins get NaN values and a zero count.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim == 1:
        residuals = residuals[:, None]
    positions = np.asarray(positions, dtype=float)
    edges = default_bins(positions) if bins is None else np.asarray(bins, dtype=float)
    i, j = np.triu_indices(len(positions), k=1)
    h = np.hypot(*(positions[i] - positions[j]).T)
    which = np.searchsorted(edges, h, side="right") - 1
    ok = (which >= 0) & (which < len(edges) - 1)
    which, i, j, h = which[ok], i[ok], j[ok], h[ok]
    n_bins = len(edges) - 1
    counts = np.bincount(which, minlength=n_bins)
    sq = (residuals[i] - residuals[j]) ** 2
    sums = np.stack([np.bincount(which, weights=sq[:, k], minlength=n_bins)
                     for k in range(residuals.shape[1])], axis=1)
    lag_sum = np.bincount(which, weights=h, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = sums / (2.0 * counts[:, None])
        lags = np.where(counts > 0, lag_sum / counts, 0.5 * (edges[:-1] + edges[1:]))
    return Variogram(edges, lags, values, counts)


@dataclass(frozen=True)
class MaternFit:
    sills: np.ndarray
    etas: np.ndarray
    nuggets: np.ndarray
    eta: float
    residual_norm: float

    @property
    def effective_range(self):
        return effective_range(self.eta)


def effective_range(eta):
    """Lag where the Matérn 3/2 correlation falls to 0.05."""
    return EFFECTIVE_RANGE_FACTOR / eta


def _fit_one(lags, vals, counts, fit_nugget):
    top = float(np.max(vals))
    if not top > 0 or np.ptp(vals) <= 1e-12 * top:
        raise FitDiverged("variogram is flat; sill and range are unidentifiable")
    w = np.sqrt(counts)
    scale_h = float(np.max(lags))

    def resid(theta):
        sill, eta = theta[0], theta[1]
        nug = theta[2] if fit_nugget else 0.0
        return w * (nug + sill * (1.0 - matern32(lags, eta)) - vals) / top

    x0 = [top, 3.0 * EFFECTIVE_RANGE_FACTOR / scale_h] + ([0.0] if fit_nugget else [])
    lo = [0.0, 1e-6 / scale_h] + ([0.0] if fit_nugget else [])
    hi = [np.inf, 1e4 / scale_h] + ([np.inf] if fit_nugget else [])
    sol = optimize.least_squares(resid, x0, bounds=(lo, hi), x_scale="jac",
                                 xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success or not np.isfinite(sol.x).all() or sol.x[0] <= 0:
        raise FitDiverged("Matérn fit did not converge")
    if sol.x[1] >= 0.999 * hi[1] or sol.x[1] <= 1.001 * lo[1]:
        raise FitDiverged("fitted range is at the search boundary")
    nug = sol.x[2] if fit_nugget else 0.0
    return sol.x[0], sol.x[1], nug, float(np.sum((sol.fun * top) ** 2))


def fit_matern(variogram, fit_nugget=False):
    """Weighted least-squares Matérn 3/2 fit per response plus a pooled eta.

    Weights are the bin pair counts; the pooled eta is the count-weighted
    mean over responses.
    """
    keep = ~variogram.empty
    if keep.sum() < 4:
        raise FitDiverged("need at least 4 non-empty variogram bins")
    lags = variogram.lags[keep]
    counts = variogram.counts[keep].astype(float)
    sills, etas, nugs, norms = [], [], [], []
    for k in range(variogram.values.shape[1]):
        s, e, n, r = _fit_one(lags, variogram.values[keep, k], counts, fit_nugget)
        sills.append(s)
        etas.append(e)
        nugs.append(n)
        norms.append(r)
    etas = np.array(etas)
    # every response shares the same pair counts, so the pooled eta is the plain mean
    return MaternFit(np.array(sills), etas, np.array(nugs), float(etas.mean()),
                     float(np.sqrt(np.sum(norms))))


def chi2_diagnostic(residuals, cov):
    """Quadratic forms ``r_i' S^-1 r_i`` and their KS distance to chi-square(p).

    ``cov`` is a :class:`SeparableCovariance` (its cross-response matrix is
    used) or a p x p matrix.
    """
    residuals = np.asarray(residuals, dtype=float)
    mat = cov.cross if isinstance(cov, SeparableCovariance) else np.asarray(cov, dtype=float)
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise SingularCovariance("residual covariance is not invertible") from None
    if np.min(np.diag(chol)) <= 1e-12 * np.sqrt(np.max(np.diag(mat))):
        raise SingularCovariance("residual covariance is not invertible")
    z = np.linalg.solve(chol, residuals.T)
    q = (z * z).sum(axis=0)
    ks = stats.kstest(q, stats.chi2(mat.shape[0]).cdf).statistic
    return q, float(ks)


@dataclass(frozen=True)
class FittedModel:
    trend: TrendModel
    cov: SeparableCovariance
    diagnostics: dict = field(default_factory=dict)

    def to_config(self):
        """Model section loadable by the command-line config."""
        return {
            "model": {
                "beta0": [float(v) for v in self.trend.beta0],
                "beta1": [[float(v) for v in row] for row in self.trend.beta1],
                "sigma": [float(v) for v in self.cov.sigma],
                "gamma": float(self.cov.gamma[0, 1]),
                "eta": float(self.cov.eta),
            }
        }


def calibrate(positions, values, bins=None, fit_nugget=False):
    """Full calibration of a bivariate dataset.

    Returns
    -------
    FittedModel, Variogram, chi-square quadratic forms
    """
    positions = np.asarray(positions, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) < MIN_ROWS:
        raise InsufficientData(f"need at least {MIN_ROWS} rows, got {len(values)}")
    trend, resid = fit_trend(positions, values)
    gamma, var = residual_cross_corr(resid)
    if not np.isfinite(gamma) or np.any(var <= 0):
        raise SingularCovariance("a residual series is constant")
    vg = empirical_variogram(resid, positions, bins)
    fit = fit_matern(vg, fit_nugget)
    cov = SeparableCovariance(np.sqrt(fit.sills), float(np.clip(gamma, -1.0, 1.0)), fit.eta)
    empirical = SeparableCovariance(np.sqrt(var), float(np.clip(gamma, -1.0, 1.0)), fit.eta)
    q, ks = chi2_diagnostic(resid, empirical)
    diag = {
        "gamma": gamma,
        "residual_variance": [float(v) for v in var],
        "sill": [float(v) for v in fit.sills],
        "nugget": [float(v) for v in fit.nuggets],
        "eta_per_response": [float(v) for v in fit.etas],
        "eta": fit.eta,
        "effective_range": fit.effective_range,
        "ks_distance": ks,
        "variogram_residual_norm": fit.residual_norm,
    }
    return FittedModel(trend, cov, diag), vg, q
