"""Replicate survey simulations.

Each replicate draws one ground truth on the grid, shared by every
strategy.  Measurement noise is keyed by replicate and leg (start node, end
node, how often that leg was flown), so strategies that fly the same leg
see the same noise.
"""
import csv
import json
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .cokriging import ObservationBatch, condition_batch, prior_state, update
from .errors import DegenerateTruth
from .excursion import _weights, bernoulli_variance, ep_field
from .gaussian_core import robust_cholesky
from .grf_model import LocationBatch, _distances, matern32, sample_truth
from .planner import (STATIC, LegModel, StrategyConfig, SurveyState, lookahead_step,
                      myopic_step, naive_step, static_path)


@dataclass(frozen=True)
class SurveyConfig:
    stages: int = 10
    replicates: int = 100
    measurements_per_leg: int = 1
    noise_sd: tuple = (0.5, 0.5)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    seed: int = 0
    start_node: int = 53

    def __post_init__(self):
        if self.stages < 0:
            raise ValueError("stages must be non-negative")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.measurements_per_leg < 1:
            raise ValueError("measurements_per_leg must be at least 1")
        if any(s < 0 for s in self.noise_sd):
            raise ValueError("noise standard deviations must be non-negative")

    @property
    def leg(self):
        return LegModel(self.measurements_per_leg, tuple(self.noise_sd))


@dataclass(frozen=True)
class StageMetrics:
    strategy: str
    replicate: int
    stage: int
    node: int
    distance: float
    ibv: float
    rmse: tuple
    r2: tuple
    wall_time_criterion: float
    wall_time_decision: float

    def row(self):
        out = {k: v for k, v in asdict(self).items() if k not in ("rmse", "r2")}
        for i, (e, r) in enumerate(zip(self.rmse, self.r2)):
            out[f"rmse_{i}"] = e
            out[f"r2_{i}"] = r
        return out

    @classmethod
    def from_row(cls, row):
        p = sum(1 for k in row if k.startswith("rmse_"))
        return cls(str(row["strategy"]), int(row["replicate"]), int(row["stage"]),
                   int(row["node"]), float(row["distance"]), float(row["ibv"]),
                   tuple(float(row[f"rmse_{i}"]) for i in range(p)),
                   tuple(float(row[f"r2_{i}"]) for i in range(p)),
                   float(row["wall_time_criterion"]), float(row["wall_time_decision"]))


def seed_keys(*keys):
    """Integer entropy list for string or integer keys."""
    return [int(k) if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode())
            for k in keys]


def stream_seed(*keys):
    """Deterministic seed sequence from integer or string keys."""
    return np.random.SeedSequence(seed_keys(*keys))


class GroundTruth:
    """A field realization on the grid, extendable to off-grid points.

    Off-grid values are conditional draws given the grid realization (each
    point drawn independently, seeded by its coordinates).
    """

    def __init__(self, prior, grid, values, seed=0):
        # seed: an integer or a list of integer keys
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.size, prior.p):
            raise ValueError(f"truth must have shape {(grid.size, prior.p)}")
        values.setflags(write=False)
        self.prior = prior
        self.grid = grid
        self.values = values
        self.seed = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
        self._resid = values - prior.trend.field(grid.locations)
        self._chol = None
        self._lr = robust_cholesky(prior.cov.cross).factor

    @classmethod
    def draw(cls, prior, grid, seed):
        keys = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
        return cls(prior, grid, sample_truth(prior, grid, np.random.SeedSequence(keys)), keys)

    def _spatial(self):
        if self._chol is None:
            locs = self.grid.locations
            k = matern32(_distances(locs, locs), self.prior.cov.eta)
            res = robust_cholesky(k)
            self._chol = res.factor
        return self._chol

    def at_points(self, coords):
        """Truth at arbitrary points, shape (n, p)."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        out = np.empty((len(coords), self.prior.p))
        chol = self._spatial()
        trend = self.prior.trend.field(coords)
        locs = self.grid.locations
        for i, u in enumerate(coords):
            d = np.hypot(*(locs - u).T)
            hit = np.flatnonzero(d < 1e-12)
            if hit.size:
                out[i] = self.values[hit[0]]
                continue
            k = matern32(d, self.prior.cov.eta)
            lam = cho_solve((chol, True), k)
            mean = lam @ self._resid
            var = max(1.0 - k @ lam, 0.0)
            key = tuple(int(v) for v in np.round(u * 1e9))
            z = np.random.default_rng(stream_seed(*self.seed, "point", *key)).standard_normal(self.prior.p)
            out[i] = trend[i] + mean + np.sqrt(var) * (self._lr @ z)
        return out

    def at(self, xs):
        """Truth at generalized locations."""
        if len(xs) == 0:
            return np.zeros(0)
        vals = self.at_points(xs.coords)
        return vals[np.arange(len(xs)), xs.responses]


def synth_measure(truth, xs, noise_sd, seed):
    """Noisy observations ``truth + eps`` with independent Gaussian noise."""
    sd = np.asarray(noise_sd, dtype=float)[xs.responses]
    eps = np.random.default_rng(seed).standard_normal(len(xs)) * sd
    return ObservationBatch(xs, truth.at(xs) + eps, np.diag(sd ** 2))


def rmse_and_r2(estimate, truth):
    """Per-response RMSE and explained variance over the grid.

    ``r2 = 1 - SSE / SST`` with SST about the truth's spatial mean; it is not
    clipped and goes negative for estimates worse than that mean.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"shapes differ: {estimate.shape} vs {truth.shape}")
    if estimate.ndim == 1:
        estimate, truth = estimate[:, None], truth[:, None]
    sse = ((estimate - truth) ** 2).sum(axis=0)
    sst = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    if np.any(sst == 0):
        raise DegenerateTruth("truth is constant for at least one response")
    return np.sqrt(sse / len(truth)), 1.0 - sse / sst


@dataclass
class SurveyResult:
    metrics: list
    trajectory: list
    states: list        # SurveyState per stage when requested


def _metrics(name, rep, stage, node, dist, state, truth, spec, w, t_total, t_decide):
    ep = ep_field(state, spec)
    rmse, r2 = rmse_and_r2(state.mean.reshape(-1, state.p), truth.values)
    return StageMetrics(name, rep, stage, node, float(dist), float(w @ bernoulli_variance(ep)),
                        tuple(float(v) for v in rmse), tuple(float(v) for v in r2),
                        t_total, t_decide)


def run_survey(prior, grid, graph, truth, spec, cfg, weights=None, base=None,
               replicate=0, keep_states=False):
    """Fly one survey of ``cfg.stages`` legs and record per-stage metrics.

    Stage 0 reports the prior.  The criterion wall time covers the onboard
    cycle of each stage: choosing the next node and assimilating its batch.
    """
    state = base or prior_state(prior, grid)
    w = _weights(state, weights)
    strat = cfg.strategy
    name = strat.kind
    leg = cfg.leg
    here = cfg.start_node
    if not 0 <= here < graph.node_count:
        raise ValueError(f"start node {here} is not in the graph")
    survey = SurveyState(here, (here,), state)
    path = static_path(name, graph, here, cfg.stages) if name in STATIC and cfg.stages else []
    flown = {}
    dist = 0.0
    metrics = [_metrics(name, replicate, 0, here, 0.0, state, truth, spec, w, 0.0, 0.0)]
    states = [survey] if keep_states else []
    rng_seed = stream_seed(cfg.seed, replicate, name)
    step_seeds = rng_seed.spawn(max(cfg.stages, 1))
    for stage in range(1, cfg.stages + 1):
        t0 = time.perf_counter()
        if name in STATIC:
            # an exhausted static path holds position and keeps sampling
            nxt = path[stage - 1] if stage <= len(path) else here
        elif name == "naive":
            nxt = naive_step(survey, graph, spec, strat).chosen
        elif name == "myopic":
            nxt = myopic_step(survey, graph, spec, w, strat, leg).chosen
        else:
            seed = int(step_seeds[stage - 1].generate_state(1)[0])
            nxt = lookahead_step(survey, graph, spec, w, strat, leg, seed).chosen
        t1 = time.perf_counter()
        count = flown.get((here, nxt), 0)
        flown[(here, nxt)] = count + 1
        xs = leg.locations(graph, here, nxt)
        batch = synth_measure(truth, xs, leg.noise_sd,
                              stream_seed(cfg.seed, replicate, "leg", here, nxt, count))
        state = update(state, batch)
        t2 = time.perf_counter()
        if nxt != here:
            dist += 1.0
        here = nxt
        survey = SurveyState(here, survey.visited + (here,), state, stage)
        metrics.append(_metrics(name, replicate, stage, here, dist, state, truth, spec, w,
                                t2 - t0, t1 - t0))
        if keep_states:
            states.append(survey)
    return SurveyResult(metrics, list(survey.visited), states)


@dataclass
class ReplicateReport:
    rows: list
    aggregate: list
    seeds: dict


_AGG_FIELDS = ("distance", "ibv", "wall_time_criterion", "wall_time_decision")


def aggregate(rows):
    """Per (strategy, stage) mean, sd, min and max of every metric."""
    groups = {}
    for r in rows:
        groups.setdefault((r.strategy, r.stage), []).append(r.row())
    out = []
    for (name, stage), items in sorted(groups.items()):
        rec = {"strategy": name, "stage": stage, "replicates": len(items)}
        keys = [k for k in items[0] if k in _AGG_FIELDS or k.startswith(("rmse_", "r2_"))]
        for k in keys:
            vals = np.array([it[k] for it in items], dtype=float)
            rec[f"{k}_mean"] = float(vals.mean())
            rec[f"{k}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rec[f"{k}_min"] = float(vals.min())
            rec[f"{k}_max"] = float(vals.max())
        out.append(rec)
    return out


def thread_count():
    """Worker cap from ``EXCURSION_THREADS`` (default 1)."""
    raw = os.environ.get("EXCURSION_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"EXCURSION_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def run_replicates(prior, grid, graph, spec, configs, weights=None, threads=None):
    """Run every strategy config on ``replicates`` common truths.

    All configs must share ``seed`` and ``replicates``.  Truth ``r`` is drawn
    from ``stream_seed(seed, r, "truth")``.
    """
    configs = list(configs)
    if not configs:
        return ReplicateReport([], [], {})
    seed = configs[0].seed
    n_rep = configs[0].replicates
    if any(c.seed != seed or c.replicates != n_rep for c in configs):
        raise ValueError("all strategy configs must share seed and replicate count")
    base = prior_state(prior, grid)
    truth_keys = {r: seed_keys(seed, r, "truth") for r in range(n_rep)}

    def one(r):
        truth = GroundTruth.draw(prior, grid, truth_keys[r])
        out = []
        for c in configs:
            out.extend(run_survey(prior, grid, graph, truth, spec, c, weights, base, r).metrics)
        return out

    workers = threads or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(one, range(n_rep)))
    else:
        chunks = [one(r) for r in range(n_rep)]
    rows = sorted((m for ch in chunks for m in ch),
                  key=lambda m: (m.strategy, m.replicate, m.stage))
    seeds = {"master": seed, "truth": truth_keys,
             "strategy": {c.strategy.kind: seed_keys(seed, "<replicate>", c.strategy.kind)
                          for c in configs}}
    return ReplicateReport(rows, aggregate(rows), seeds)


def write_records(path, records, fmt="csv"):
    """Write dict records as CSV or JSON lines."""
    records = list(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "jsonl":
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
            return
        if fmt != "csv":
            raise ValueError(f"unknown format {fmt!r}")
        if not records:
            return
        writer = csv.DictWriter(fh, fieldnames=list(records[0]))
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})


def read_records(path, fmt="csv"):
    with open(path, encoding="utf-8") as fh:
        if fmt == "jsonl":
            return [json.loads(line) for line in fh if line.strip()]
        return list(csv.DictReader(fh))


def snapshot(survey):
    """JSON-ready record of a survey state (the posterior via its history)."""
    return {
        "node": int(survey.current_node),
        "visited": [int(v) for v in survey.visited],
        "stage": int(survey.stage),
        "batches": [
            {"coords": b.xs.coords.tolist(), "responses": b.xs.responses.tolist(),
             "values": b.values.tolist(), "noise": b.noise.tolist()}
            for b in survey.posterior.history
        ],
    }


def restore(record, prior, grid, base=None):
    """Rebuild a :class:`SurveyState` from :func:`snapshot` output."""
    try:
        batches = [ObservationBatch(LocationBatch(b["coords"], b["responses"]),
                                    b["values"], b["noise"]) for b in record["batches"]]
        visited = tuple(int(v) for v in record["visited"])
        node = int(record["node"])
        stage = int(record.get("stage", len(batches)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed snapshot: {exc}") from exc
    state = condition_batch(prior, grid, batches, base)
    return SurveyState(node, visited, state, stage)
