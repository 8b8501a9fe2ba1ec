"""Compare the compiled and pure-Python kernels.

Times the population scorer that dominates a calibration, then one full
XLF term fit under each backend.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sigmoidvol import kernels
from sigmoidvol.calibration import CalibrationConfig, TermProblem, calibration_nodes, reduced_mode
from sigmoidvol.cli import _bundled, load_grid
from sigmoidvol.market_data import build_terms, default_sigma_star, load_context, load_quotes

FIT_SNIPPET = """
import time
from sigmoidvol import kernels
from sigmoidvol.calibration import CalibrationConfig, bootstrap, calibration_nodes
from sigmoidvol.cli import _bundled, load_grid
from sigmoidvol.market_data import build_terms, default_sigma_star, load_context, load_quotes
ctx = load_context(_bundled("xlf_context.json"))
terms = build_terms(load_quotes(_bundled("xlf_quotes.csv")), ctx)
ss = default_sigma_star(terms)
grid = load_grid(_bundled("xlf_grid.json"), terms, ctx, ss)
start = time.perf_counter()
bootstrap(terms, calibration_nodes(grid.chi), CalibrationConfig(), ss)
print(kernels.BACKEND, time.perf_counter() - start)
"""


def _problem():
    ctx = load_context(_bundled("xlf_context.json"))
    terms = build_terms(load_quotes(_bundled("xlf_quotes.csv")), ctx)
    ss = default_sigma_star(terms)
    grid = load_grid(_bundled("xlf_grid.json"), terms, ctx, ss)
    cfg = CalibrationConfig()
    term = terms[-1]
    return TermProblem(term, calibration_nodes(grid.chi), cfg.model(ss), cfg, reduced_mode(len(term)))


def bench_population(repeat: int) -> dict:
    pb = _problem()
    rng = np.random.default_rng(0)
    P = pb.to_params(rng.uniform(size=(16, int(pb.free.sum()))))
    args = (P, pb.zq, pb.wq, pb.wt, pb.wlo, pb.whi, pb.zn, pb.chin, pb.wprev, pb.sqrt_t,
            pb.model.sigma_star, pb.model.p, pb.model.sigmoid_id, pb.vconv, pb.wscale)
    out = {}
    for name in ("python", "compiled"):
        try:
            mod = kernels.backend_module(name)
        except ImportError:
            print(f"{name:9s} unavailable")
            continue
        t = min(timeit.repeat(lambda: mod.evaluate_population(*args), number=200, repeat=repeat)) / 200
        out[name] = t
        print(f"{name:9s} evaluate_population (16 candidates): {t * 1e6:8.1f} us")
    if len(out) == 2:
        print(f"speed-up {out['python'] / out['compiled']:.1f}x")
    return out


def bench_fit() -> None:
    for name in ("python", "compiled"):
        env = dict(os.environ, SIGMOIDVOL_BACKEND=name)
        proc = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True, text=True)
        if proc.returncode:
            print(f"{name:9s} fit failed: {proc.stderr.strip().splitlines()[-1]}")
            continue
        backend, seconds = proc.stdout.split()
        print(f"{backend:9s} XLF ends-only bootstrap: {float(seconds):6.2f} s")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    bench_population(args.repeat)
    bench_fit()


if __name__ == "__main__":
    main()
