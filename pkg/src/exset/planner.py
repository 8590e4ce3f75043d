"""Waypoint graph and sequential sampling strategies.

The vehicle moves along edges of an equilateral triangular lattice.  Nodes
are arranged in vertical columns spaced ``pitch * sqrt(3) / 2`` apart, odd
columns shifted north by half a pitch, so each interior node has neighbours
at 30, 90, 150, 210, 270 and 330 degrees (0 = east, 90 = north).

Node numbering is row-major from the south-west: row ``j`` holds every
column ``c`` (even columns at ``y_j``, odd ones at ``y_j + pitch / 2``).
"""
from dataclasses import dataclass, field

import numpy as np

from .cokriging import ObservationBatch, gain, update
from .criteria import CandidateDesign, covariance_drop, eibv, node_terms
from .errors import DegenerateExtent
from .excursion import _weights, block_subsample, ep_field
from .gaussian_core import QmcConfig
from .grf_model import LocationBatch

TIE_TOL = 1e-12
STRATEGIES = ("static_north", "static_east", "static_zigzag", "naive", "myopic", "lookahead")
STATIC = ("static_north", "static_east", "static_zigzag")
PLANNING_QMC = QmcConfig(sample_count=256, seed=0, randomization_count=8)


@dataclass(frozen=True)
class WaypointGraph:
    nodes: np.ndarray
    adjacency: tuple
    pitch: float
    columns: int
    rows: int

    @property
    def node_count(self):
        return len(self.nodes)

    def neighbors(self, node):
        return self.adjacency[node]

    def direction(self, a, b):
        """Heading from node ``a`` to node ``b`` in whole degrees, 0 = east."""
        dx, dy = self.nodes[b] - self.nodes[a]
        return int(round(np.degrees(np.arctan2(dy, dx)))) % 360

    def step(self, node, heading):
        """Neighbour of ``node`` at ``heading`` degrees, or None at an edge."""
        for nb in self.adjacency[node]:
            if self.direction(node, nb) == heading % 360:
                return nb
        return None


def default_pitch(grid):
    """Pitch giving 21 lattice columns across the grid extent."""
    x0, x1, _, _ = grid.extent
    return 2.0 * (x1 - x0) / (21.0 * np.sqrt(3.0))


def build_graph(grid, pitch=None):
    """Equilateral waypoint lattice centred in the grid extent."""
    pitch = default_pitch(grid) if pitch is None else float(pitch)
    if not pitch > 0:
        raise DegenerateExtent("lattice pitch must be positive")
    x0, x1, y0, y1 = grid.extent
    width, height = x1 - x0, y1 - y0
    col_w = pitch * np.sqrt(3.0) / 2.0
    n_col = int(np.floor(width / col_w + 1e-6))
    n_row = int(np.floor((height - pitch / 2.0) / pitch + 1e-6)) + 1 if n_col > 1 else \
        int(np.floor(height / pitch + 1e-6))
    if n_col < 1 or n_row < 1:
        raise DegenerateExtent(f"pitch {pitch:g} does not fit in the extent")
    xs = x0 + (width - (n_col - 1) * col_w) / 2.0 + np.arange(n_col) * col_w
    span = (n_row - 1) * pitch + (pitch / 2.0 if n_col > 1 else 0.0)
    ys = y0 + (height - span) / 2.0 + np.arange(n_row) * pitch
    nodes = np.array([(xs[c], ys[j] + (pitch / 2.0 if c % 2 else 0.0))
                      for j in range(n_row) for c in range(n_col)])
    diff = nodes[:, None, :] - nodes[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    adj = (dist <= pitch * (1 + 1e-9)) & (dist > 0)
    adjacency = tuple(tuple(int(k) for k in np.flatnonzero(row)) for row in adj)
    nodes.setflags(write=False)
    return WaypointGraph(nodes, adjacency, pitch, n_col, n_row)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "myopic"
    lookahead_samples: int = 30
    prune_revisits: bool = True
    qmc: QmcConfig = PLANNING_QMC
    lookahead_stride: int = 1

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.lookahead_samples < 1:
            raise ValueError("lookahead_samples must be at least 1")
        if self.lookahead_stride < 1:
            raise ValueError("lookahead_stride must be at least 1")


@dataclass(frozen=True)
class SurveyState:
    current_node: int
    visited: tuple
    posterior: object
    stage: int = 0

    def __post_init__(self):
        if not self.visited or self.visited[-1] != self.current_node:
            raise ValueError("current node must be the last visited node")


@dataclass(frozen=True)
class LegModel:
    """How a move between nodes turns into an observation batch."""

    measurements_per_leg: int = 1
    noise_sd: tuple = (0.5, 0.5)

    def coords(self, graph, a, b):
        fr = np.arange(1, self.measurements_per_leg + 1) / self.measurements_per_leg
        return graph.nodes[a] + fr[:, None] * (graph.nodes[b] - graph.nodes[a])

    def locations(self, graph, a, b):
        return LocationBatch.isotopic(self.coords(graph, a, b), len(self.noise_sd))

    def noise(self):
        var = np.asarray(self.noise_sd, dtype=float) ** 2
        return np.diag(np.tile(var, self.measurements_per_leg))

    def design(self, graph, a, b):
        return CandidateDesign(self.locations(graph, a, b), self.noise())


@dataclass(frozen=True)
class StepResult:
    chosen: int
    scores: dict = field(default_factory=dict)


def candidates(state, graph, cfg):
    """Neighbours of the current node, without visited ones when pruning."""
    nbs = graph.neighbors(state.current_node)
    if cfg.prune_revisits:
        seen = set(state.visited)
        kept = tuple(n for n in nbs if n not in seen)
        if kept:
            return kept
    return tuple(nbs)


def select(scores):
    """Lowest score; scores within the tie tolerance go to the lowest index."""
    best = min(scores.values())
    return min(n for n, s in scores.items() if s - best <= TIE_TOL)


def _node_cells(state, graph, nodes):
    grid = state.posterior.grid
    return [grid.nearest(graph.nodes[n]) for n in nodes]


def naive_step(state, graph, spec, cfg=None):
    """Candidate whose excursion probability is closest to one half."""
    cfg = cfg or StrategyConfig("naive")
    cand = candidates(state, graph, cfg)
    ep = ep_field(state.posterior, spec, cfg.qmc)
    cells = _node_cells(state, graph, cand)
    scores = {n: abs(float(ep[c]) - 0.5) for n, c in zip(cand, cells)}
    return StepResult(select(scores), scores)


def myopic_step(state, graph, spec, weights=None, cfg=None, leg=None):
    """Candidate with the smallest expected IBV after its leg's batch."""
    cfg = cfg or StrategyConfig("myopic")
    leg = leg or LegModel()
    cand = candidates(state, graph, cfg)
    scores = {}
    for n in cand:
        design = leg.design(graph, state.current_node, n)
        scores[n] = eibv(state.posterior, design, spec, weights, cfg.qmc).expected_ibv
    return StepResult(select(scores), scores)


def _lookahead_value(post, graph, spec, cells, w, cfg, leg, here, first, visited, z):
    """Monte Carlo estimate of E[min_u' EIBV(u' | first-stage data)].

    Only the grid ``cells`` (with weights ``w``) enter the inner sums.
    """
    p = post.p
    design = leg.design(graph, here, first)
    g1 = gain(post, design.xs, design.noise)
    # covariances after the first leg do not depend on the observed values
    hyp = update(post, ObservationBatch(design.xs, g1.pred_mean, design.noise))
    _, cov1 = hyp.marginals()
    cov1 = cov1[cells]
    inner = SurveyState(first, visited + (first,), hyp)
    seconds = candidates(inner, graph, cfg)
    drops = [covariance_drop(gain(hyp, leg.design(graph, first, s).xs, leg.noise()), p)[cells]
             for s in seconds]
    # y - mu_n(x) ~ N(0, S1) drawn from common normals
    vals, vecs = np.linalg.eigh(g1.pred_cov)
    root = vecs * np.sqrt(np.maximum(vals, 0.0))
    innov = z @ root.T
    m = len(innov)
    n = len(cells)
    idx = (cells[:, None] * p + np.arange(p)).ravel()
    means = (post.mean[idx][None, :] + innov @ g1.weights[:, idx]).reshape(m * n, p)
    k_all = np.broadcast_to(cov1, (m,) + cov1.shape).reshape(m * n, p, p)
    values = np.empty((len(seconds), m))
    for i, drop in enumerate(drops):
        d_all = np.broadcast_to(drop, (m,) + drop.shape).reshape(m * n, p, p)
        _, exp, _ = node_terms(means, k_all, d_all, spec, cfg.qmc)
        values[i] = exp.reshape(m, n) @ w
    return float(values.min(axis=0).mean()), dict(zip(seconds, values))


def lookahead_step(state, graph, spec, weights=None, cfg=None, leg=None, seed=0):
    """Two-step look-ahead: expected best second-stage EIBV per first move.

    With ``cfg.lookahead_stride > 1`` the inner sums run over a block
    subsample of the grid (see :func:`~exset.excursion.block_subsample`).
    """
    cfg = cfg or StrategyConfig("lookahead")
    leg = leg or LegModel()
    post = state.posterior
    cells, w = block_subsample(post.grid, _weights(post, weights), cfg.lookahead_stride)
    cand = candidates(state, graph, cfg)
    q = leg.measurements_per_leg * post.p
    z = np.random.default_rng(seed).standard_normal((cfg.lookahead_samples, q))
    scores = {}
    for n in cand:
        scores[n], _ = _lookahead_value(post, graph, spec, cells, w, cfg, leg,
                                        state.current_node, n, state.visited, z)
    return StepResult(select(scores), scores)


def static_path(kind, graph, start, length):
    """Nodes visited by a static design after ``start`` (stops at the edge)."""
    if length < 1:
        raise ValueError("length must be at least 1")
    path = []
    here = start
    y0 = graph.nodes[start][1]
    for k in range(length):
        if kind == "static_north":
            nxt = graph.step(here, 90)
        elif kind == "static_east":
            opts = [graph.step(here, h) for h in (30, 330)]
            opts = [o for o in opts if o is not None]
            nxt = min(opts, key=lambda o: (abs(graph.nodes[o][1] - y0), graph.direction(here, o) != 30)) \
                if opts else None
        elif kind == "static_zigzag":
            nxt = graph.step(here, (90, 30, 90, 150)[k % 4])
        else:
            raise ValueError(f"{kind!r} is not a static design")
        if nxt is None:
            break
        path.append(nxt)
        here = nxt
    return path
