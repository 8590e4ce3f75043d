import numpy as np
import pytest

from _builders import random_state
from exset.cokriging import ObservationBatch, condition_batch, prior_state, update
from exset.criteria import CandidateDesign, eibv
from exset.errors import DegenerateExtent
from exset.excursion import ExcursionSpec, ep_field
from exset.gaussian_core import QmcConfig
from exset.grf_model import GrfPrior, GridDomain, SeparableCovariance, TrendModel
from exset.planner import (LegModel, StrategyConfig, SurveyState, _lookahead_value, build_graph,
                           candidates, default_pitch, lookahead_step, myopic_step, naive_step,
                           select, static_path)

PRIOR = GrfPrior(TrendModel([5.8, 24.0], [[0.0, -4.0], [0.0, -3.8]]),
                 SeparableCovariance([2.5, 2.25], 0.2, 3.5))
SPEC = ExcursionSpec([3.8, 22.1], ("above", "above"))
GRID = GridDomain()
GRAPH = build_graph(GRID)


def small_setup(nx=9, columns=5):
    grid = GridDomain(nx, nx)
    graph = build_graph(grid, 2.0 / (columns * np.sqrt(3.0)))
    return grid, graph


def test_default_graph_shape():
    assert GRAPH.columns == 21 and GRAPH.rows == 18
    assert GRAPH.node_count == 378
    assert GRAPH.pitch == pytest.approx(default_pitch(GRID))


def test_start_node_sits_south_centre():
    x, y = GRAPH.nodes[53]
    assert 0.45 < x < 0.6 and y < 0.25
    dirs = sorted(GRAPH.direction(53, n) for n in GRAPH.neighbors(53))
    assert dirs == [30, 90, 150, 210, 270, 330]


def test_adjacency_symmetric_with_pitch_spacing():
    for a in range(GRAPH.node_count):
        for b in GRAPH.neighbors(a):
            assert a in GRAPH.neighbors(b)
            assert np.hypot(*(GRAPH.nodes[a] - GRAPH.nodes[b])) == pytest.approx(GRAPH.pitch, abs=1e-9)


def test_nodes_inside_extent_and_interior_degree():
    x0, x1, y0, y1 = GRID.extent
    assert np.all((GRAPH.nodes[:, 0] >= x0) & (GRAPH.nodes[:, 0] <= x1))
    assert np.all((GRAPH.nodes[:, 1] >= y0) & (GRAPH.nodes[:, 1] <= y1))
    degrees = np.array([len(GRAPH.neighbors(n)) for n in range(GRAPH.node_count)])
    assert degrees.max() == 6
    assert np.all(degrees >= 2)
    # nodes at least one pitch away from every lattice edge are interior
    pad = GRAPH.pitch * 1.01
    xs, ys = GRAPH.nodes.T
    inner = ((xs > xs.min() + pad) & (xs < xs.max() - pad)
             & (ys > ys.min() + pad) & (ys < ys.max() - pad))
    assert np.all(degrees[inner] == 6)


def test_numbering_is_row_major_from_south_west():
    first_row = GRAPH.nodes[:GRAPH.columns]
    assert np.all(np.diff(first_row[:, 0]) > 0)
    assert GRAPH.nodes[0, 1] == pytest.approx(GRAPH.nodes[2, 1])
    assert GRAPH.nodes[GRAPH.columns, 1] > GRAPH.nodes[0, 1]


def test_minimal_two_column_lattice_degree():
    # columns are vertical here, so the minimal strip is two columns wide
    grid = GridDomain(4, 4, (0.0, 0.3, 0.0, 1.0))
    graph = build_graph(grid, 0.15)
    assert graph.columns == 2
    assert all(len(graph.neighbors(n)) <= 4 for n in range(graph.node_count))


def test_graph_rejects_bad_pitch():
    with pytest.raises(DegenerateExtent):
        build_graph(GRID, 0.0)
    with pytest.raises(DegenerateExtent):
        build_graph(GRID, 5.0)


def _survey(node, visited=None, state=None):
    state = state or prior_state(PRIOR, GRID)
    visited = tuple(visited or ()) + (node,)
    return SurveyState(node, visited, state)


def test_candidates_interior_fallback_and_corner():
    cfg = StrategyConfig("myopic")
    assert len(candidates(_survey(53), GRAPH, cfg)) == 6
    all_seen = _survey(53, visited=GRAPH.neighbors(53))
    assert sorted(candidates(all_seen, GRAPH, cfg)) == sorted(GRAPH.neighbors(53))
    one_left = _survey(53, visited=GRAPH.neighbors(53)[1:])
    assert candidates(one_left, GRAPH, cfg) == (GRAPH.neighbors(53)[0],)
    assert len(candidates(_survey(0), GRAPH, cfg)) <= 3
    unpruned = StrategyConfig("myopic", prune_revisits=False)
    assert len(candidates(_survey(53, visited=GRAPH.neighbors(53)), GRAPH, unpruned)) == 6


def test_select_tie_break():
    assert select({5: 1.0, 3: 1.0 + 5e-13, 7: 0.9999999}) == 7
    assert select({5: 1.0, 3: 1.0 + 5e-13, 7: 2.0}) == 3
    assert select({4: 0.2}) == 4


def test_survey_state_invariant():
    with pytest.raises(ValueError):
        SurveyState(1, (0, 2), None)


def test_strategy_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig("random")
    with pytest.raises(ValueError):
        StrategyConfig("lookahead", lookahead_samples=0)
    with pytest.raises(ValueError):
        StrategyConfig("lookahead", lookahead_stride=0)


def test_naive_matches_brute_force_scan(rng):
    state, spec = random_state(rng, 9, 9, n_obs=4)
    grid, graph = state.grid, build_graph(state.grid)
    start = graph.node_count // 2
    res = naive_step(_survey(start, state=state), graph, spec)
    ep = ep_field(state, spec)
    brute = {}
    for n in graph.neighbors(start):
        d = np.hypot(*(grid.locations - graph.nodes[n]).T)
        brute[n] = abs(ep[int(np.argmin(d))] - 0.5)
    assert res.chosen == min(brute, key=lambda n: (brute[n], n))
    for n, s in brute.items():
        assert res.scores[n] == pytest.approx(s, abs=1e-12)


def test_myopic_uninformative_ties_go_to_lowest_index():
    state = prior_state(PRIOR, GridDomain(9, 9))
    graph = build_graph(state.grid)
    start = graph.node_count // 2
    leg = LegModel(1, (1e8, 1e8))
    res = myopic_step(_survey(start, state=state), graph, SPEC, None, StrategyConfig(), leg)
    assert res.chosen == min(graph.neighbors(start))
    vals = np.array(list(res.scores.values()))
    assert np.ptp(vals) < 1e-12


def test_myopic_single_candidate():
    state = prior_state(PRIOR, GridDomain(9, 9))
    graph = build_graph(state.grid)
    start = graph.node_count // 2
    nbs = graph.neighbors(start)
    res = myopic_step(_survey(start, visited=nbs[:-1], state=state), graph, SPEC)
    assert res.chosen == nbs[-1] and list(res.scores) == [nbs[-1]]


def test_myopic_stage_one_matches_recomputed_argmin():
    cfg = StrategyConfig("myopic")
    leg = LegModel()
    state = prior_state(PRIOR, GRID)
    first = leg.design(GRAPH, 53, 74)
    batch = ObservationBatch(first.xs, [4.1, 22.5], first.noise)
    state = update(state, batch)
    survey = SurveyState(74, (53, 74), state, 1)
    res = myopic_step(survey, GRAPH, SPEC, None, cfg, leg)
    fresh = condition_batch(PRIOR, GRID, [batch])
    brute = {}
    for n in candidates(survey, GRAPH, cfg):
        d = leg.design(GRAPH, 74, n)
        brute[n] = eibv(fresh, CandidateDesign(d.xs, d.noise), SPEC, None, cfg.qmc).expected_ibv
    assert res.chosen == min(brute, key=lambda n: (brute[n], n))
    for n in brute:
        assert res.scores[n] == pytest.approx(brute[n], abs=1e-9)


def test_myopic_never_worse_than_naive_on_its_criterion():
    for seed in range(8):
        rng = np.random.default_rng(40 + seed)
        state, spec = random_state(rng, 7, 7, n_obs=3)
        graph = build_graph(state.grid, 2.0 / (7 * np.sqrt(3.0)))
        start = int(rng.integers(graph.node_count))
        survey = _survey(start, state=state)
        my = myopic_step(survey, graph, spec)
        nv = naive_step(survey, graph, spec)
        assert my.scores[my.chosen] <= my.scores[nv.chosen] + 1e-12


def test_static_paths():
    north = static_path("static_north", GRAPH, 53, 10)
    ys = [GRAPH.nodes[53][1]] + [GRAPH.nodes[n][1] for n in north]
    assert np.all(np.diff(ys) > 0)
    assert static_path("static_north", GRAPH, 53, 1) == [GRAPH.step(53, 90)]
    east = static_path("static_east", GRAPH, 53, 10)
    xs = [GRAPH.nodes[53][0]] + [GRAPH.nodes[n][0] for n in east]
    assert np.all(np.diff(xs) > 0)
    assert max(abs(GRAPH.nodes[n][1] - GRAPH.nodes[53][1]) for n in east) <= GRAPH.pitch / 2 + 1e-12
    zig = static_path("static_zigzag", GRAPH, 53, 8)
    here, lateral = 53, []
    for n in zig:
        dx = GRAPH.nodes[n][0] - GRAPH.nodes[here][0]
        if abs(dx) > 1e-12:
            lateral.append(np.sign(dx))
        here = n
    assert lateral == [1, -1, 1, -1]


def test_static_paths_stop_at_the_boundary():
    top = GRAPH.node_count - 1
    assert static_path("static_north", GRAPH, top, 5) == []
    east = static_path("static_east", GRAPH, 53, 100)
    assert len(east) < 100
    with pytest.raises(ValueError):
        static_path("myopic", GRAPH, 53, 3)
    with pytest.raises(ValueError):
        static_path("static_north", GRAPH, 53, 0)


def _reference_lookahead(state, graph, spec, cfg, leg, start, z):
    """Nested loop: full update per draw, full-grid EIBV per second move."""
    scores = {}
    for first in candidates(SurveyState(start, (start,), state), graph, cfg):
        design = leg.design(graph, start, first)
        mean_x, cov_x, _ = state.predictive(design.xs)
        vals, vecs = np.linalg.eigh(cov_x + design.noise)
        root = vecs * np.sqrt(np.maximum(vals, 0.0))
        best = []
        for zi in z:
            y = mean_x + root @ zi
            post = update(state, ObservationBatch(design.xs, y, design.noise))
            inner = SurveyState(first, (start, first), post)
            best.append(min(eibv(post, leg.design(graph, first, s), spec, None, cfg.qmc).expected_ibv
                            for s in candidates(inner, graph, cfg)))
        scores[first] = float(np.mean(best))
    return scores


def test_lookahead_matches_nested_loop_reference():
    rng = np.random.default_rng(5)
    state, spec = random_state(rng, 9, 9, n_obs=2)
    graph = build_graph(state.grid, 2.0 / (5 * np.sqrt(3.0)))
    cfg = StrategyConfig("lookahead", lookahead_samples=20)
    leg = LegModel(1, (0.4, 0.4))
    start = 7
    res = lookahead_step(SurveyState(start, (start,), state), graph, spec, None, cfg, leg, seed=11)
    z = np.random.default_rng(11).standard_normal((20, 2))
    ref = _reference_lookahead(state, graph, spec, cfg, leg, start, z)
    assert set(ref) == set(res.scores)
    for n in ref:
        assert res.scores[n] == pytest.approx(ref[n], abs=1e-9)
    assert res.chosen == select(ref)


def test_lookahead_zero_draw_is_nested_deterministic_minimum():
    rng = np.random.default_rng(6)
    state, spec = random_state(rng, 7, 7, n_obs=1)
    graph = build_graph(state.grid, 2.0 / (5 * np.sqrt(3.0)))
    cfg = StrategyConfig("lookahead", lookahead_samples=1)
    leg = LegModel()
    start, first = 6, graph.neighbors(6)[0]
    cells = np.arange(state.grid.size)
    w = np.full(state.grid.size, state.grid.cell_area)
    value, per_second = _lookahead_value(state, graph, spec, cells, w, cfg, leg, start, first,
                                         (start,), np.zeros((1, 2)))
    design = leg.design(graph, start, first)
    mean_x, _, _ = state.predictive(design.xs)
    post = update(state, ObservationBatch(design.xs, mean_x, design.noise))
    inner = SurveyState(first, (start, first), post)
    direct = {s: eibv(post, leg.design(graph, first, s), spec, None, cfg.qmc).expected_ibv
              for s in candidates(inner, graph, cfg)}
    assert value == pytest.approx(min(direct.values()), abs=1e-9)
    for s, v in direct.items():
        assert per_second[s][0] == pytest.approx(v, abs=1e-9)


def test_lookahead_is_deterministic_under_seed():
    grid, graph = small_setup()
    state = prior_state(PRIOR, grid)
    cfg = StrategyConfig("lookahead", lookahead_samples=4, qmc=QmcConfig(128, 0, 8))
    survey = SurveyState(7, (7,), state)
    a = lookahead_step(survey, graph, SPEC, None, cfg, seed=3)
    b = lookahead_step(survey, graph, SPEC, None, cfg, seed=3)
    assert a == b


def test_lookahead_stride_uses_block_weights():
    grid, graph = small_setup()
    state = prior_state(PRIOR, grid)
    coarse = StrategyConfig("lookahead", lookahead_samples=3, lookahead_stride=3)
    res = lookahead_step(SurveyState(7, (7,), state), graph, SPEC, None, coarse, seed=1)
    assert res.chosen in graph.neighbors(7)
    assert all(0 <= v <= 0.25 for v in res.scores.values())


def test_leg_model_places_measurements_along_the_leg():
    leg = LegModel(3, (0.25, 0.25))
    pts = leg.coords(GRAPH, 53, 74)
    a, b = GRAPH.nodes[53], GRAPH.nodes[74]
    np.testing.assert_allclose(pts, [a + f * (b - a) for f in (1 / 3, 2 / 3, 1.0)])
    xs = leg.locations(GRAPH, 53, 74)
    assert len(xs) == 6
    np.testing.assert_allclose(np.diag(leg.noise()), [0.0625] * 6)
    np.testing.assert_array_equal(xs.responses, [0, 1] * 3)
