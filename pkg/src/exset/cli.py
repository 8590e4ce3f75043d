"""Command-line interface.

Subcommands: ``pointwise-table``, ``simulate``, ``replicate``, ``plan-step``
and ``calibrate``.  Exit status is 0 on success, 2 for configuration or
input errors and 3 for numerical failures.
"""
import argparse
import json
import os
import sys

import numpy as np
import yaml

from . import kernels
from .calibration import calibrate, default_bins, load_survey_csv
from .cokriging import prior_state
from .config import RunConfig
from .errors import ConfigError, InputError, NumericalError
from .excursion import bernoulli_variance, default_weights, ep_field
from .planner import STATIC, SurveyState, lookahead_step, myopic_step, naive_step
from .pointwise import compare, pointwise_table
from .simulator import (GroundTruth, restore, run_replicates, run_survey, seed_keys, snapshot,
                        stream_seed, thread_count, write_records)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _ext(fmt):
    return "jsonl" if fmt == "jsonl" else "csv"


def _outdir(cfg):
    path = cfg.raw["output"]["dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _write(cfg, name, records):
    fmt = cfg.raw["output"]["format"]
    path = os.path.join(_outdir(cfg), f"{name}.{_ext(fmt)}")
    write_records(path, records, fmt)
    return path


def cmd_pointwise_table(cfg, args):
    pw = cfg.raw["pointwise"]
    rows = pointwise_table(pw["sigmas"], pw["gammas"], float(pw["noise_sd"]), cfg.qmc)
    checks = compare(rows, float(pw["tolerance"]))
    _write(cfg, "pointwise_table", rows)
    _write(cfg, "pointwise_check", checks)
    print(f"{'sigma':>5} {'gamma':>5} {'p':>7} {'p(1-p)':>7} {'ebv_both':>9} {'ebv_first':>9}")
    for r in rows:
        print(f"{r['sigma']:5.1f} {r['gamma']:5.1f} {r['p']:7.4f} {r['bernoulli_variance']:7.4f} "
              f"{r['ebv_both']:9.4f} {r['ebv_first']:9.4f}")
    n_pass = sum(c["pass"] for c in checks)
    print(f"reference check: {n_pass}/{len(checks)} within {pw['tolerance']}")
    return EXIT_OK


def cmd_simulate(cfg, args):
    grid, graph, spec = cfg.grid, cfg.graph, cfg.spec
    base = prior_state(cfg.prior, grid)
    truth = GroundTruth.draw(cfg.prior, grid, seed_keys(cfg.seed, 0, "truth"))
    res = run_survey(cfg.prior, grid, graph, truth, spec, cfg.survey(cfg.strategy),
                     base=base, keep_states=True)
    _write(cfg, "metrics", [m.row() for m in res.metrics])
    _write(cfg, "trajectory", [
        {"stage": k, "node": n, "x": float(graph.nodes[n][0]), "y": float(graph.nodes[n][1])}
        for k, n in enumerate(res.trajectory)])
    fields = []
    for k, sv in enumerate(res.states):
        ep = ep_field(sv.posterior, spec, cfg.qmc)
        bv = bernoulli_variance(ep)
        for c, (x, y) in enumerate(grid.locations):
            fields.append({"stage": k, "cell": c, "x": float(x), "y": float(y),
                           "ep": float(ep[c]), "bernoulli_variance": float(bv[c])})
    _write(cfg, "fields", fields)
    snap_dir = os.path.join(_outdir(cfg), "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    for k, sv in enumerate(res.states):
        with open(os.path.join(snap_dir, f"stage_{k:03d}.json"), "w", encoding="utf-8") as fh:
            json.dump(snapshot(sv), fh)
    cfg.dump(os.path.join(_outdir(cfg), "manifest.yaml"),
             {"command": "simulate", "truth_seed": seed_keys(cfg.seed, 0, "truth"),
              "backend": kernels.BACKEND})
    last = res.metrics[-1]
    print(f"{cfg.strategy.kind}: {len(res.trajectory) - 1} stages, final IBV {last.ibv:.5f}, "
          f"path {' '.join(map(str, res.trajectory))}")
    return EXIT_OK


def cmd_replicate(cfg, args):
    report = run_replicates(cfg.prior, cfg.grid, cfg.graph, cfg.spec, cfg.survey_configs(),
                            threads=thread_count())
    _write(cfg, "replicates", [m.row() for m in report.rows])
    _write(cfg, "aggregate", report.aggregate)
    cfg.dump(os.path.join(_outdir(cfg), "manifest.yaml"),
             {"command": "replicate", "seeds": report.seeds, "backend": kernels.BACKEND})
    final = max(a["stage"] for a in report.aggregate)
    for a in report.aggregate:
        if a["stage"] == final:
            print(f"{a['strategy']:>14}: final IBV {a['ibv_mean']:.5f} "
                  f"(sd {a['ibv_sd']:.5f}), criterion time {a['wall_time_criterion_mean']:.4f}s")
    return EXIT_OK


def cmd_plan_step(cfg, args):
    snap_path = args.snapshot or cfg.raw["plan_step"]["snapshot"]
    if snap_path is None:
        survey = None
    else:
        try:
            with open(snap_path, encoding="utf-8") as fh:
                record = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read snapshot {snap_path}: {exc}") from exc
        survey = restore(record, cfg.prior, cfg.grid)
    node = args.node if args.node is not None else cfg.raw["plan_step"]["node"]
    if survey is None:
        start = cfg.raw["graph"]["start_node"] if node is None else int(node)
        survey = SurveyState(start, (start,), prior_state(cfg.prior, cfg.grid))
    elif node is not None and int(node) != survey.current_node:
        survey = SurveyState(int(node), survey.visited + (int(node),), survey.posterior,
                             survey.stage)
    graph = cfg.graph
    if not 0 <= survey.current_node < graph.node_count:
        raise ConfigError(f"node {survey.current_node} is not in the graph")
    kind = cfg.strategy.kind
    w = default_weights(cfg.grid)
    leg = cfg.survey(cfg.strategy).leg
    if kind in STATIC:
        raise ConfigError("plan-step needs an adaptive strategy (naive, myopic or lookahead)")
    if kind == "naive":
        res = naive_step(survey, graph, cfg.spec, cfg.strategy)
    elif kind == "myopic":
        res = myopic_step(survey, graph, cfg.spec, w, cfg.strategy, leg)
    else:
        seq = stream_seed(cfg.seed, 0, kind).spawn(survey.stage + 1)[survey.stage]
        res = lookahead_step(survey, graph, cfg.spec, w, cfg.strategy, leg,
                             int(seq.generate_state(1)[0]))
    rows = [{"node": n, "direction": graph.direction(survey.current_node, n), "score": s,
             "chosen": n == res.chosen} for n, s in sorted(res.scores.items())]
    _write(cfg, "plan_step", rows)
    if cfg.raw["output"]["format"] == "jsonl":
        for r in rows:
            print(json.dumps(r))
    else:
        print(f"{'node':>5} {'dir':>4} {'score':>12}")
        for r in rows:
            print(f"{r['node']:5d} {r['direction']:4d} {r['score']:12.6g}{'  *' if r['chosen'] else ''}")
    print(f"chosen {res.chosen}")
    return EXIT_OK


def cmd_calibrate(cfg, args):
    path = args.data or cfg.raw["calibrate"]["data"]
    if path is None:
        raise ConfigError("calibrate needs --data or calibrate.data")
    data = load_survey_csv(path)
    c = cfg.raw["calibrate"]
    bins = default_bins(data.positions, int(c["bins"]))
    fitted, vg, q = calibrate(data.positions, data.values, bins, bool(c["fit_nugget"]))
    out = _outdir(cfg)
    with open(os.path.join(out, "fitted_model.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(fitted.to_config(), fh, sort_keys=False)
    _write(cfg, "variogram", [
        {"lag": float(h), "count": int(n), "temperature": float(v[0]), "salinity": float(v[1])}
        for h, n, v in zip(vg.lags, vg.counts, vg.values)])
    _write(cfg, "chi2", [{"row": i, "q": float(v)} for i, v in enumerate(q)])
    with open(os.path.join(out, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(fitted.diagnostics, fh, indent=2)
    d = fitted.diagnostics
    print(f"gamma {d['gamma']:.3f}  sills {d['sill'][0]:.4g} {d['sill'][1]:.4g}  "
          f"eta {d['eta']:.4g}  effective range {d['effective_range']:.4g}  KS {d['ks_distance']:.3f}")
    return EXIT_OK


COMMANDS = {
    "pointwise-table": cmd_pointwise_table,
    "simulate": cmd_simulate,
    "replicate": cmd_replicate,
    "plan-step": cmd_plan_step,
    "calibrate": cmd_calibrate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="exset", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("csv", "jsonl"), help="table format")
        if name == "plan-step":
            p.add_argument("--snapshot", help="survey snapshot JSON written by simulate")
            p.add_argument("--node", type=int, help="current waypoint node")
        if name == "calibrate":
            p.add_argument("--data", help="survey CSV (t,x,y,depth,temperature,salinity)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["output.dir"] = args.out
        if args.format is not None:
            changes["output.format"] = args.format
        if changes:
            cfg = cfg.override(changes)
        thread_count()
        return COMMANDS[args.command](cfg, args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
