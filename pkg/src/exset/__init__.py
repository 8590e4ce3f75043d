"""Adaptive sampling for excursion sets of vector-valued Gaussian random fields."""
from .cokriging import ObservationBatch, PosteriorState, condition_batch, posterior_marginal, prior_state, update
from .criteria import CandidateDesign, EibvBreakdown, eemv, eibv, expected_phi_power, expected_phi_product
from .excursion import (ExcursionSpec, bernoulli_variance_field, emv, ep_field, excursion_moment,
                        excursion_probability, ibv)
from .gaussian_core import QmcConfig, mvn_cdf, mvn_sample, robust_cholesky
from .grf_model import (GeneralizedLocation, GrfPrior, GridDomain, LocationBatch, SeparableCovariance,
                        TrendModel, matern32, prior_cov, prior_mean, sample_truth)
from .kernels import BACKEND
from .planner import StrategyConfig, SurveyState, WaypointGraph, build_graph, candidates, static_path

__version__ = "0.1.0"
