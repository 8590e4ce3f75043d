"""Single-location study of excursion probability and expected Bernoulli variance.

At one location with prior mean equal to the thresholds, unit-free
variances ``sigma^2`` and correlation ``gamma``, compare observing both
responses against observing the first response only, with noise sd 0.5.
"""
import numpy as np

from .cokriging import prior_state
from .criteria import CandidateDesign, eibv
from .excursion import ExcursionSpec, ep_field
from .grf_model import GrfPrior, GridDomain, LocationBatch, SeparableCovariance, TrendModel

# reference values (rounded): keyed by (sigma, gamma)
REFERENCE = {
    (1.0, 0.2): {"p": 0.28, "bernoulli_variance": 0.20, "ebv_both": 0.092, "ebv_first": 0.151},
    (1.0, 0.6): {"p": 0.35, "bernoulli_variance": 0.23, "ebv_both": 0.089, "ebv_first": 0.138},
    (1.0, 0.8): {"p": 0.40, "bernoulli_variance": 0.24, "ebv_both": 0.085, "ebv_first": 0.123},
    (2.0, 0.2): {"p": 0.28, "bernoulli_variance": 0.20, "ebv_both": 0.052, "ebv_first": 0.137},
    (2.0, 0.6): {"p": 0.35, "bernoulli_variance": 0.23, "ebv_both": 0.051, "ebv_first": 0.114},
    (2.0, 0.8): {"p": 0.40, "bernoulli_variance": 0.24, "ebv_both": 0.049, "ebv_first": 0.093},
}


def pointwise_row(sigma, gamma, noise_sd=0.5, cfg=None):
    """EP, Bernoulli variance and expected BV for both / first-only designs."""
    prior = GrfPrior(TrendModel([0.0, 0.0], np.zeros((2, 2))),
                     SeparableCovariance([sigma, sigma], gamma, 1.0))
    state = prior_state(prior, GridDomain(1, 1))
    spec = ExcursionSpec([0.0, 0.0])
    u = [[0.5, 0.5]]
    both = eibv(state, CandidateDesign(LocationBatch.isotopic(u, 2), noise_sd ** 2), spec, cfg=cfg)
    first = eibv(state, CandidateDesign(LocationBatch(u, [0]), noise_sd ** 2), spec, cfg=cfg)
    p = float(ep_field(state, spec, cfg)[0])
    return {
        "sigma": float(sigma),
        "gamma": float(gamma),
        "p": float(p),
        "bernoulli_variance": both.current_ibv,
        "ebv_both": both.expected_ibv,
        "ebv_first": first.expected_ibv,
    }


def pointwise_table(sigmas=(1.0, 2.0), gammas=(0.2, 0.6, 0.8), noise_sd=0.5, cfg=None):
    return [pointwise_row(s, g, noise_sd, cfg) for s in sigmas for g in gammas]


def compare(rows, tolerance=0.005):
    """One record per (row, quantity) with the reference value and a verdict."""
    out = []
    for row in rows:
        ref = REFERENCE.get((row["sigma"], row["gamma"]))
        if ref is None:
            continue
        for key, val in ref.items():
            out.append({
                "sigma": row["sigma"], "gamma": row["gamma"], "quantity": key,
                "computed": row[key], "reference": val,
                "abs_error": abs(row[key] - val), "pass": abs(row[key] - val) <= tolerance,
            })
    return out
