"""Compare the compiled and pure-Python orthant kernels.

Run ``python3 benchmarks/bench_kernels.py``.  Kernel timings call both
backends directly; the end-to-end timing runs one myopic decision on the
default 31 x 31 grid in a subprocess per backend (``EXSET_PURE_PYTHON``).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from exset import _kernels_py
from exset.gaussian_core import _lattice

try:
    from exset import _kernels as _compiled
except ImportError:
    _compiled = None

END_TO_END = """
import time
from exset import kernels
from exset.cokriging import prior_state
from exset.config import RunConfig
from exset.planner import SurveyState, myopic_step
cfg = RunConfig()
state = SurveyState(53, (53,), prior_state(cfg.prior, cfg.grid))
t = time.perf_counter()
myopic_step(state, cfg.graph, cfg.spec, cfg=cfg.strategy)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_bvn(n, repeat):
    rng = np.random.default_rng(0)
    h, k = rng.normal(size=(2, n))
    r = rng.uniform(-0.95, 0.95, n)
    out = {"python": _best(lambda: _kernels_py.bvn_lower(h, k, r), repeat)}
    if _compiled is not None:
        out["compiled"] = _best(lambda: _compiled.bvn_lower(h, k, r), repeat)
    return out


def bench_orthant(n_inst, dim, points, shifts, repeat):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(n_inst, dim, dim))
    cov = np.ascontiguousarray(a @ np.swapaxes(a, 1, 2) + 0.1 * np.eye(dim))
    upper = np.ascontiguousarray(rng.normal(size=(n_inst, dim)))
    alpha, sh = _lattice(dim, 0, shifts)
    out = {"python": _best(lambda: _kernels_py.orthant_qmc(cov, upper, alpha, sh, points), repeat)}
    if _compiled is not None:
        out["compiled"] = _best(lambda: _compiled.orthant_qmc(cov, upper, alpha, sh, points), repeat)
    return out


def bench_end_to_end():
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, EXSET_PURE_PYTHON=pure)
        proc = subprocess.run([sys.executable, "-c", END_TO_END], env=env,
                              capture_output=True, text=True, check=True)
        backend, secs = proc.stdout.split()
        out[backend] = float(secs)
    return out


def report(name, times):
    line = f"{name:<34}" + "".join(f"{k:>10} {v * 1e3:9.1f} ms" for k, v in sorted(times.items()))
    if "compiled" in times:
        line += f"   speed-up {times['python'] / times['compiled']:.1f}x"
    print(line)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-end-to-end", action="store_true")
    args = parser.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; timing the pure-Python backend only")
    report("bvn_lower, 100k pairs", bench_bvn(100_000, args.repeat))
    report("orthant_qmc, d=4, 2000 x 256x8", bench_orthant(2000, 4, 256, 8, args.repeat))
    report("orthant_qmc, d=8, 200 x 512x16", bench_orthant(200, 8, 512, 16, args.repeat))
    if not args.skip_end_to_end:
        report("myopic decision, 31x31 grid", bench_end_to_end())


if __name__ == "__main__":
    main()
