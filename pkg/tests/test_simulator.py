import dataclasses
import json

import numpy as np
import pytest
from scipy import stats

from exset.cokriging import prior_state, update
from exset.errors import DegenerateTruth
from exset.excursion import ExcursionSpec, ibv
from exset.gaussian_core import QmcConfig
from exset.grf_model import GrfPrior, GridDomain, LocationBatch, SeparableCovariance, TrendModel
from exset.planner import StrategyConfig, build_graph
from exset.simulator import (GroundTruth, StageMetrics, SurveyConfig, aggregate, read_records,
                             restore, rmse_and_r2, run_replicates, run_survey, seed_keys,
                             snapshot, stream_seed, synth_measure, thread_count, write_records)

PRIOR = GrfPrior(TrendModel([5.8, 24.0], [[0.0, -4.0], [0.0, -3.8]]),
                 SeparableCovariance([2.5, 2.25], 0.2, 3.5))
SPEC = ExcursionSpec([3.8, 22.1], ("above", "above"))
GRID = GridDomain(9, 9)
GRAPH = build_graph(GRID)
START = 40
FAST = QmcConfig(128, 0, 8)
TIMES = ("wall_time_criterion", "wall_time_decision")


def config(kind="myopic", stages=3, replicates=1, seed=0, **kw):
    return SurveyConfig(stages, replicates, 1, (0.5, 0.5),
                        StrategyConfig(kind, lookahead_samples=3, qmc=FAST), seed, START, **kw)


def strip_times(rows):
    return [{k: v for k, v in r.items() if k not in TIMES} for r in rows]


def test_rmse_r2_hand_example():
    rmse, r2 = rmse_and_r2([1.0, 2.0, 4.0], [1.0, 2.0, 3.0])
    assert rmse[0] == pytest.approx(0.57735, abs=1e-5)
    assert r2[0] == pytest.approx(0.5)


def test_rmse_r2_limits(rng):
    truth = rng.normal(size=(30, 2))
    rmse, r2 = rmse_and_r2(truth, truth)
    np.testing.assert_array_equal(rmse, 0.0)
    np.testing.assert_array_equal(r2, 1.0)
    _, r2 = rmse_and_r2(np.broadcast_to(truth.mean(axis=0), truth.shape), truth)
    np.testing.assert_allclose(r2, 0.0, atol=1e-14)
    _, r2 = rmse_and_r2(truth + 10, truth)
    assert np.all(r2 < 0)


def test_rmse_r2_errors():
    with pytest.raises(DegenerateTruth):
        rmse_and_r2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        rmse_and_r2([1.0, 2.0], [1.0, 2.0, 3.0])


def test_synth_measure_noiseless_is_truth():
    truth = GroundTruth.draw(PRIOR, GRID, [1])
    xs = LocationBatch.isotopic(GRID.locations[[3, 8]], 2)
    batch = synth_measure(truth, xs, (0.0, 0.0), seed=4)
    np.testing.assert_array_equal(batch.values, truth.values[[3, 3, 8, 8], [0, 1, 0, 1]])
    np.testing.assert_array_equal(batch.noise, 0.0)


def test_synth_measure_noise_level_and_determinism():
    truth = GroundTruth.draw(PRIOR, GRID, [2])
    xs = LocationBatch(np.repeat(GRID.locations[[10]], 500, axis=0), np.zeros(500, int))
    draws = np.concatenate([synth_measure(truth, xs, (0.5, 0.5), seed=s).values
                            for s in range(200)])
    assert draws.std() == pytest.approx(0.5, rel=0.01)
    a = synth_measure(truth, xs, (0.5, 0.5), seed=9)
    b = synth_measure(truth, xs, (0.5, 0.5), seed=9)
    assert np.array_equal(a.values, b.values)


def test_truth_extension_to_points():
    truth = GroundTruth.draw(PRIOR, GRID, [3, 4])
    np.testing.assert_array_equal(truth.at_points(GRID.locations[:5]), truth.values[:5])
    pts = np.array([[0.31, 0.52], [0.77, 0.18]])
    a = truth.at_points(pts)
    b = GroundTruth.draw(PRIOR, GRID, [3, 4]).at_points(pts[::-1])[::-1]
    np.testing.assert_array_equal(a, b)
    # a point very close to a node is close to the node's value
    near = truth.at_points(GRID.locations[12] + 1e-6)
    np.testing.assert_allclose(near[0], truth.values[12], atol=1e-2)


def test_truth_requires_matching_shape():
    with pytest.raises(ValueError):
        GroundTruth(PRIOR, GRID, np.zeros((3, 2)))


def test_seed_keys_are_stable():
    assert seed_keys(1, "truth") == seed_keys(1, "truth")
    assert seed_keys(1, "truth") != seed_keys(1, "leg")
    a = stream_seed(0, 1, "myopic").generate_state(2)
    b = stream_seed(0, 1, "myopic").generate_state(2)
    assert np.array_equal(a, b)


def test_zero_stages_reports_prior_only():
    truth = GroundTruth.draw(PRIOR, GRID, [0])
    res = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config(stages=0))
    assert len(res.metrics) == 1 and res.trajectory == [START]
    m = res.metrics[0]
    assert m.ibv == pytest.approx(ibv(prior_state(PRIOR, GRID), SPEC))
    assert m.distance == 0.0


@pytest.mark.parametrize("kind", ["static_north", "static_east", "static_zigzag", "naive",
                                  "myopic", "lookahead"])
def test_every_strategy_makes_one_move_per_stage(kind):
    truth = GroundTruth.draw(PRIOR, GRID, [5])
    res = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config(kind, stages=4))
    assert len(res.trajectory) == 5
    assert [m.stage for m in res.metrics] == list(range(5))
    assert all(m.ibv >= 0 for m in res.metrics)
    assert np.all(np.diff([m.distance for m in res.metrics]) >= 0)
    for a, b in zip(res.trajectory, res.trajectory[1:]):
        assert a == b or b in GRAPH.neighbors(a)


def test_exhausted_static_path_holds_position():
    truth = GroundTruth.draw(PRIOR, GRID, [6])
    top = GRAPH.node_count - 1
    cfg = dataclasses.replace(config("static_north", stages=2), start_node=top)
    res = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, cfg)
    assert res.trajectory == [top, top, top]
    assert res.metrics[-1].distance == 0.0


def test_survey_is_deterministic():
    truth = GroundTruth.draw(PRIOR, GRID, [7])
    a = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config("myopic"))
    b = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config("myopic"))
    assert a.trajectory == b.trajectory
    assert strip_times([m.row() for m in a.metrics]) == strip_times([m.row() for m in b.metrics])


def test_full_information_limit():
    truth = GroundTruth.draw(PRIOR, GRID, [8])
    xs = LocationBatch.isotopic(GRID.locations, 2)
    batch = synth_measure(truth, xs, (0.0, 0.0), seed=1)
    state = update(prior_state(PRIOR, GRID), batch)
    rmse, r2 = rmse_and_r2(state.mean.reshape(-1, 2), truth.values)
    assert np.all(rmse < 1e-6)
    assert ibv(state, SPEC) < 1e-6


def test_identical_first_legs_see_identical_noise():
    truth = GroundTruth.draw(PRIOR, GRID, [9])
    a = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config("static_north", 1), keep_states=True)
    b = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config("static_zigzag", 1), keep_states=True)
    assert a.trajectory == b.trajectory
    ha, hb = a.states[-1].posterior.history[0], b.states[-1].posterior.history[0]
    assert np.array_equal(ha.values, hb.values)


def test_replicates_share_truth_across_strategies():
    cfgs = [config(k, stages=2, replicates=2) for k in ("naive", "static_east")]
    report = run_replicates(PRIOR, GRID, GRAPH, SPEC, cfgs, threads=1)
    stage0 = {}
    for m in report.rows:
        if m.stage == 0:
            stage0.setdefault(m.replicate, set()).add((m.rmse, m.r2, m.ibv))
    assert all(len(v) == 1 for v in stage0.values())
    assert len(report.rows) == 2 * 2 * 3
    assert report.seeds["truth"][1] == seed_keys(0, 1, "truth")


def test_single_replicate_has_zero_spread():
    report = run_replicates(PRIOR, GRID, GRAPH, SPEC, [config("naive", 2, 1)], threads=1)
    for rec in report.aggregate:
        assert rec["ibv_sd"] == 0.0
        assert rec["ibv_min"] == rec["ibv_max"] == rec["ibv_mean"]


def test_aggregate_matches_rows():
    report = run_replicates(PRIOR, GRID, GRAPH, SPEC, [config("static_east", 2, 3)], threads=1)
    for rec in report.aggregate:
        vals = [m.ibv for m in report.rows if m.stage == rec["stage"]]
        assert rec["ibv_mean"] == pytest.approx(np.mean(vals))
        assert rec["ibv_sd"] == pytest.approx(np.std(vals, ddof=1))
        assert rec["replicates"] == 3
    assert aggregate([]) == []


def test_threads_do_not_change_results():
    cfgs = [config("myopic", 2, 3)]
    one = run_replicates(PRIOR, GRID, GRAPH, SPEC, cfgs, threads=1)
    many = run_replicates(PRIOR, GRID, GRAPH, SPEC, cfgs, threads=3)
    assert strip_times([m.row() for m in one.rows]) == strip_times([m.row() for m in many.rows])


def test_replicate_configs_must_agree():
    with pytest.raises(ValueError):
        run_replicates(PRIOR, GRID, GRAPH, SPEC, [config(seed=0), config(seed=1)])


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.delenv("EXCURSION_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("EXCURSION_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("EXCURSION_THREADS", "0")
    assert thread_count() == 1
    monkeypatch.setenv("EXCURSION_THREADS", "many")
    with pytest.raises(ValueError):
        thread_count()


def test_realized_ibv_drops_over_the_survey():
    cfg = config("myopic", stages=5, replicates=8)
    report = run_replicates(PRIOR, GRID, GRAPH, SPEC, [cfg], threads=1)
    first = [m.ibv for m in report.rows if m.stage == 0]
    last = [m.ibv for m in report.rows if m.stage == 5]
    assert stats.ttest_rel(last, first, alternative="less").pvalue < 0.05


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_metrics_round_trip(tmp_path, fmt):
    truth = GroundTruth.draw(PRIOR, GRID, [10])
    res = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config("naive", 2))
    path = tmp_path / f"m.{fmt}"
    write_records(path, [m.row() for m in res.metrics], fmt)
    back = [StageMetrics.from_row(r) for r in read_records(path, fmt)]
    assert back == res.metrics


def test_write_records_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_records(tmp_path / "x", [{"a": 1}], "xml")


def test_snapshot_restore_round_trip():
    truth = GroundTruth.draw(PRIOR, GRID, [11])
    res = run_survey(PRIOR, GRID, GRAPH, truth, SPEC, config("myopic", 3), keep_states=True)
    last = res.states[-1]
    record = json.loads(json.dumps(snapshot(last)))
    back = restore(record, PRIOR, GRID)
    assert back.current_node == last.current_node
    assert back.visited == last.visited and back.stage == last.stage
    np.testing.assert_allclose(back.posterior.mean, last.posterior.mean, atol=1e-8)
    np.testing.assert_allclose(back.posterior.cov, last.posterior.cov, atol=1e-8)


def test_restore_rejects_malformed_snapshot():
    with pytest.raises(ValueError):
        restore({"node": 1}, PRIOR, GRID)


def test_survey_config_validation():
    with pytest.raises(ValueError):
        SurveyConfig(stages=-1)
    with pytest.raises(ValueError):
        SurveyConfig(replicates=0)
    with pytest.raises(ValueError):
        SurveyConfig(noise_sd=(-0.1, 0.5))
    with pytest.raises(ValueError):
        run_survey(PRIOR, GRID, GRAPH, GroundTruth.draw(PRIOR, GRID, [0]), SPEC,
                   dataclasses.replace(config(), start_node=10_000))
