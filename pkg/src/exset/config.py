"""Run configuration.

A config is a YAML mapping of sections; every key is optional and unknown
keys are rejected.  ``dump`` writes the fully resolved config, which loads
back to the same run.
"""
import copy

import numpy as np
import yaml

from .errors import ConfigError
from .excursion import ExcursionSpec
from .gaussian_core import QmcConfig
from .grf_model import GrfPrior, GridDomain, SeparableCovariance, TrendModel
from .planner import STRATEGIES, StrategyConfig, build_graph
from .simulator import SurveyConfig

DEFAULTS = {
    "seed": 0,
    "model": {
        "beta0": [5.8, 24.0],
        "beta1": [[0.0, -4.0], [0.0, -3.8]],
        "sigma": [2.5, 2.25],
        "gamma": 0.2,
        "eta": 3.5,
    },
    "excursion": {
        "thresholds": [3.8, 22.1],
        "orientation": ["above", "above"],
    },
    "grid": {"nx": 31, "ny": 31, "extent": [0.0, 1.0, 0.0, 1.0]},
    "graph": {"pitch": None, "start_node": 53},
    "strategy": {
        "kind": "myopic",
        "lookahead_samples": 30,
        "prune_revisits": True,
        "lookahead_stride": 1,
    },
    "survey": {
        "mode": "simulation",
        "stages": 10,
        "replicates": 100,
        "measurements_per_leg": None,
        "noise_sd": None,
        "strategies": list(STRATEGIES),
    },
    "qmc": {"sample_count": 4096, "randomization_count": 16},
    "planning_qmc": {"sample_count": 256, "randomization_count": 8},
    "pointwise": {"sigmas": [1.0, 2.0], "gammas": [0.2, 0.6, 0.8], "noise_sd": 0.5,
                  "tolerance": 0.005},
    "plan_step": {"snapshot": None, "node": None},
    "calibrate": {"data": None, "bins": 15, "fit_nugget": False},
    "output": {"dir": "out", "format": "csv"},
    # free-form record written into manifests; ignored when loading
    "provenance": None,
}

MODE_DEFAULTS = {
    "simulation": {"measurements_per_leg": 1, "noise_sd": [0.5, 0.5]},
    "field": {"measurements_per_leg": 3, "noise_sd": [0.25, 0.25]},
}


def _merge(base, override, path=""):
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


class RunConfig:
    """Validated run definition with typed accessors."""

    def __init__(self, data=None):
        raw = copy.deepcopy(DEFAULTS)
        if data:
            if not isinstance(data, dict):
                raise ConfigError("config must be a mapping")
            _merge(raw, data)
        self.raw = raw
        try:
            self._build()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        return cls(data or {})

    def _build(self):
        r = self.raw
        seed = r["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        m = r["model"]
        self.prior = GrfPrior(TrendModel(m["beta0"], m["beta1"]),
                              SeparableCovariance(m["sigma"], m["gamma"], float(m["eta"])))
        ex = r["excursion"]
        self.spec = ExcursionSpec(ex["thresholds"], ex["orientation"])
        if self.spec.p != self.prior.p:
            raise ConfigError("excursion thresholds and model disagree on the response count")
        g = r["grid"]
        self.grid = GridDomain(int(g["nx"]), int(g["ny"]), tuple(g["extent"]))
        self.qmc = QmcConfig(int(r["qmc"]["sample_count"]), seed,
                             int(r["qmc"]["randomization_count"]))
        self.planning_qmc = QmcConfig(int(r["planning_qmc"]["sample_count"]), seed,
                                      int(r["planning_qmc"]["randomization_count"]))
        s = r["strategy"]
        self.strategy = self.strategy_config(s["kind"])
        sv = r["survey"]
        if sv["mode"] not in MODE_DEFAULTS:
            raise ConfigError(f"survey.mode must be one of {sorted(MODE_DEFAULTS)}")
        preset = MODE_DEFAULTS[sv["mode"]]
        self.measurements_per_leg = int(sv["measurements_per_leg"] or preset["measurements_per_leg"])
        noise = sv["noise_sd"] if sv["noise_sd"] is not None else preset["noise_sd"]
        noise = [float(v) for v in np.broadcast_to(np.asarray(noise, dtype=float), (self.prior.p,))]
        self.noise_sd = tuple(noise)
        for kind in sv["strategies"]:
            if kind not in STRATEGIES:
                raise ConfigError(f"unknown strategy {kind!r}")
        out = r["output"]
        if out["format"] not in ("csv", "jsonl"):
            raise ConfigError("output.format must be csv or jsonl")
        self.survey(self.strategy)
        self._graph = None

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def graph(self):
        if self._graph is None:
            self._graph = build_graph(self.grid, self.raw["graph"]["pitch"])
            start = self.raw["graph"]["start_node"]
            if not 0 <= start < self._graph.node_count:
                raise ConfigError(f"start node {start} outside the graph "
                                  f"({self._graph.node_count} nodes)")
        return self._graph

    def strategy_config(self, kind):
        s = self.raw["strategy"]
        if kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {kind!r}")
        return StrategyConfig(kind, int(s["lookahead_samples"]), bool(s["prune_revisits"]),
                              self.planning_qmc, int(s["lookahead_stride"]))

    def survey(self, strategy):
        sv = self.raw["survey"]
        return SurveyConfig(int(sv["stages"]), int(sv["replicates"]), self.measurements_per_leg,
                            self.noise_sd, strategy, self.seed,
                            int(self.raw["graph"]["start_node"]))

    def survey_configs(self):
        return [self.survey(self.strategy_config(k)) for k in self.raw["survey"]["strategies"]]

    def override(self, changes):
        """New config with dotted-key overrides, e.g. ``{"survey.stages": 3}``."""
        data = copy.deepcopy(self.raw)
        for key, val in changes.items():
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = val
        return RunConfig(data)

    def dump(self, path, provenance=None):
        data = copy.deepcopy(self.raw)
        if provenance is not None:
            data["provenance"] = provenance
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(data, fh, sort_keys=False)
