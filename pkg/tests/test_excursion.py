import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtri

from _builders import random_batch, random_state
from _oracles import orthant_small
from exset.cokriging import ObservationBatch, prior_state, update
from exset.errors import DimensionCap, DimensionMismatch, OffGridLocation
from exset.excursion import (ExcursionSpec, bernoulli_variance, bernoulli_variance_field,
                             block_subsample, emv, ep_field, excursion_moment,
                             excursion_probability, ibv, stride_subsample)
from exset.grf_model import GrfPrior, GridDomain, LocationBatch, SeparableCovariance, TrendModel
from exset.simulator import GroundTruth


def centred_state(gamma, sigma=1.0, grid=None, p=2):
    grid = grid or GridDomain(1, 1)
    t = np.array([3.8, 22.1])[:p]
    cov = SeparableCovariance([sigma] * p, gamma if p == 2 else np.eye(1), 3.5)
    return prior_state(GrfPrior(TrendModel(t, np.zeros((p, 2))), cov), grid), t


def test_ep_at_threshold_mean():
    state, t = centred_state(0.6)
    assert excursion_probability(state, (0.5, 0.5), ExcursionSpec(t)) == pytest.approx(0.35, abs=5e-3)


def test_ep_below_minus_infinity_is_zero():
    state, _ = centred_state(0.6)
    assert excursion_probability(state, (0.5, 0.5), ExcursionSpec([-np.inf, 1.0])) == 0.0


def test_ep_univariate_median():
    state, t = centred_state(0.0, p=1)
    assert excursion_probability(state, (0.5, 0.5), ExcursionSpec(t)) == pytest.approx(0.5)


def test_ep_off_grid_raises():
    state, t = centred_state(0.2)
    with pytest.raises(OffGridLocation):
        excursion_probability(state, (0.1, 0.2), ExcursionSpec(t))


def test_ep_field_matches_owen_t_oracle(rng):
    state, spec = random_state(rng, 4, 4)
    mean, cov = state.marginals()
    s = spec.signs
    expected = [orthant_small((s * (np.array(spec.thresholds) - m))[None], c * np.outer(s, s))[0]
                for m, c in zip(mean, cov)]
    np.testing.assert_allclose(ep_field(state, spec), expected, atol=1e-12)


def test_orientation_symmetry_at_threshold_mean(rng):
    grid = GridDomain(4, 3)
    for gamma in (-0.5, 0.2, 0.7):
        state, t = centred_state(gamma, 1.7, grid)
        base = ep_field(state, ExcursionSpec(t, "below"))
        np.testing.assert_allclose(ep_field(state, ExcursionSpec(t, "above")), base, atol=1e-14)


def test_orientation_by_margin_negation(rng):
    state, spec = random_state(rng, 3, 3)
    t = np.array(spec.thresholds)
    mean, cov = state.marginals()
    both_above = ep_field(state, ExcursionSpec(t, ("above", "above")))
    # P(X >= t) = P(-X <= -t)
    for i in range(state.grid.size):
        ref = orthant_small((mean[i] - t)[None], cov[i])[0]
        assert both_above[i] == pytest.approx(ref, abs=1e-12)


def test_spec_validation():
    with pytest.raises(DimensionMismatch):
        ExcursionSpec([1.0, 2.0], ["below"])
    with pytest.raises(ValueError):
        ExcursionSpec([1.0], ["sideways"])
    with pytest.raises(ValueError):
        ExcursionSpec([np.nan])


@pytest.mark.parametrize("p,expected", [(0.28, 0.2016), (0.0, 0.0), (1.0, 0.0), (0.5, 0.25)])
def test_bernoulli_variance_values(p, expected):
    assert bernoulli_variance(p) == pytest.approx(expected)


def test_bernoulli_variance_field_range(rng):
    state, spec = random_state(rng, 5, 5)
    bv = bernoulli_variance_field(state, spec)
    assert np.all((bv >= 0) & (bv <= 0.25))


def test_ibv_zero_when_excursion_impossible():
    state, _ = centred_state(0.2, grid=GridDomain(3, 3))
    assert ibv(state, ExcursionSpec([-np.inf, 0.0])) == 0.0


def test_ibv_uniform_half_unit_measure():
    state, t = centred_state(0.0, grid=GridDomain(5, 4), p=1)
    assert ibv(state, ExcursionSpec(t)) == pytest.approx(0.25, abs=1e-14)


def test_ibv_two_node_hand_sum():
    grid = GridDomain(2, 1)
    x = grid.locations[:, 0]
    # means placing P(X <= 0) at 0.28 and 0.40 with unit variance
    m = -ndtri(np.array([0.28, 0.40]))
    slope = (m[1] - m[0]) / (x[1] - x[0])
    trend = TrendModel([m[0] - slope * x[0]], [[slope, 0.0]])
    state = prior_state(GrfPrior(trend, SeparableCovariance([1.0], np.eye(1), 50.0)), grid)
    assert ibv(state, ExcursionSpec([0.0]), weights=[1.0, 1.0]) == pytest.approx(0.4416, abs=1e-12)


def test_weights_validation(rng):
    state, spec = random_state(rng, 3, 3)
    with pytest.raises(DimensionMismatch):
        ibv(state, spec, weights=np.ones(4))
    with pytest.raises(ValueError):
        ibv(state, spec, weights=-np.ones(9))


def test_emv_of_a_deterministic_field_is_zero():
    grid = GridDomain(3, 3)
    prior = GrfPrior(TrendModel([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]),
                     SeparableCovariance([1e-9, 1e-9], 0.3, 3.0))
    assert emv(prior_state(prior, grid), ExcursionSpec([0.4, 0.4])) == pytest.approx(0.0, abs=1e-12)


def test_emv_single_node_is_bernoulli_variance():
    state, t = centred_state(0.4)
    spec = ExcursionSpec(t + 0.3)
    p = ep_field(state, spec)[0]
    assert emv(state, spec, weights=[2.0]) == pytest.approx(4.0 * p * (1 - p), abs=1e-12)


def test_first_moment_is_weighted_ep_sum(rng):
    state, spec = random_state(rng, 4, 3)
    w = rng.uniform(0.1, 1.0, state.grid.size)
    assert excursion_moment(state, spec, w, 1) == pytest.approx(w @ ep_field(state, spec), abs=1e-12)


def test_emv_is_second_moment_minus_squared_first(rng):
    state, spec = random_state(rng, 3, 3)
    m1 = excursion_moment(state, spec, None, 1)
    m2 = excursion_moment(state, spec, None, 2)
    v = emv(state, spec)
    assert v == pytest.approx(m2 - m1 * m1, abs=1e-10)
    assert v >= -1e-4
    assert m2 >= m1 * m1 - 1e-4


def test_moment_order_cap(rng):
    state, spec = random_state(rng, 2, 2)
    with pytest.raises(DimensionCap):
        excursion_moment(state, spec, None, 4)
    with pytest.raises(ValueError):
        excursion_moment(state, spec, None, 0)


def test_emv_univariate_three_nodes_matches_monte_carlo():
    rng = np.random.default_rng(99)
    state, spec = random_state(rng, 3, 1, p=1, n_obs=1)
    w = np.array([0.2, 0.5, 0.3])
    chol = np.linalg.cholesky(state.cov + 1e-14 * np.eye(3))
    x = state.mean + rng.standard_normal((100_000, 3)) @ chol.T
    inside = (spec.signs * (x - spec.thresholds) <= 0)
    nu = inside @ w
    n = len(nu)
    assert abs(excursion_moment(state, spec, w, 2) - np.mean(nu ** 2)) <= 3 * (nu ** 2).std() / np.sqrt(n)
    c = nu - nu.mean()
    var_se = np.sqrt(((c ** 4).mean() - c.var() ** 2) / n)
    assert abs(emv(state, spec, w) - nu.var()) <= 3 * var_se


def test_ibv_decreases_in_expectation_after_data():
    drops = []
    for seed in range(50):
        rng = np.random.default_rng(500 + seed)
        state, spec = random_state(rng, 5, 5, n_obs=0)
        truth = GroundTruth.draw(state.prior, state.grid, [seed])
        xs = LocationBatch.isotopic(rng.random((2, 2)), 2)
        noise = np.diag(np.full(len(xs), 0.3 ** 2))
        values = truth.at(xs) + rng.normal(size=len(xs)) * 0.3
        post = update(state, ObservationBatch(xs, values, noise))
        drops.append(ibv(state, spec) - ibv(post, spec))
    res = stats.ttest_1samp(drops, 0.0, alternative="greater")
    assert np.mean(drops) > 0 and res.pvalue < 0.05


def test_block_subsample_preserves_total_weight():
    grid = GridDomain(31, 31)
    w = np.full(grid.size, grid.cell_area)
    cells, agg = stride_subsample(grid, w)
    assert len(cells) <= 225
    assert agg.sum() == pytest.approx(1.0)
    cells1, agg1 = block_subsample(grid, w, 1)
    assert len(cells1) == grid.size and agg1 is w


def test_random_updates_keep_probabilities_valid(rng):
    state, spec = random_state(rng, 4, 4)
    for _ in range(3):
        state = update(state, random_batch(rng, state.prior, 2))
        ep = ep_field(state, spec)
        assert np.all((ep >= 0) & (ep <= 1))
