"""Compiled vs pure-numpy partial-volume kernels.

Times the joint-histogram and gradient kernels of both backends on the same
random inputs and checks that they agree.  Run with

    python3 benchmarks/bench_kernels.py [--samples 1000 10000 100000] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from vspfreg import kernels


def make_inputs(n, grid=64, bins=32, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.ascontiguousarray(rng.uniform(1.0, grid - 2.0, (n, 3)))
    ref_lo = rng.integers(0, bins - 1, n).astype(np.int32)
    ref_frac = rng.random(n)
    mov_bins = rng.integers(0, bins, (grid, grid, grid)).astype(np.int32)
    F = np.ascontiguousarray(rng.standard_normal((bins, bins)))
    return coords, ref_lo, ref_frac, mov_bins, bins, F


def best_time(fn, repeat):
    # best of ``repeat`` single calls after one warm-up
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(sample_counts, repeat):
    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rows = []
    for n in sample_counts:
        coords, lo, frac, mov_bins, bins, F = make_inputs(n)
        h_py = py.pv_histogram(coords, lo, frac, mov_bins, bins)
        h_cy = cy.pv_histogram(coords, lo, frac, mov_bins, bins)
        g_py = py.pv_gradient(coords, lo, frac, mov_bins, F)
        g_cy = cy.pv_gradient(coords, lo, frac, mov_bins, F)
        row = {
            "samples": n,
            "hist_python_s": best_time(lambda: py.pv_histogram(coords, lo, frac, mov_bins, bins), repeat),
            "hist_cython_s": best_time(lambda: cy.pv_histogram(coords, lo, frac, mov_bins, bins), repeat),
            "grad_python_s": best_time(lambda: py.pv_gradient(coords, lo, frac, mov_bins, F), repeat),
            "grad_cython_s": best_time(lambda: cy.pv_gradient(coords, lo, frac, mov_bins, F), repeat),
            "hist_max_abs_diff": float(np.max(np.abs(h_py - h_cy))),
            "grad_max_abs_diff": float(np.max(np.abs(g_py - g_cy))),
        }
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    rows = run(args.samples, args.repeat)
    print(f"{'samples':>8s} {'hist py':>10s} {'hist cy':>10s} {'speedup':>8s} "
          f"{'grad py':>10s} {'grad cy':>10s} {'speedup':>8s} {'max diff':>9s}")
    for r in rows:
        diff = max(r["hist_max_abs_diff"], r["grad_max_abs_diff"])
        print(f"{r['samples']:>8d} {r['hist_python_s'] * 1e3:>8.2f}ms {r['hist_cython_s'] * 1e3:>8.2f}ms "
              f"{r['hist_python_s'] / r['hist_cython_s']:>7.1f}x "
              f"{r['grad_python_s'] * 1e3:>8.2f}ms {r['grad_cython_s'] * 1e3:>8.2f}ms "
              f"{r['grad_python_s'] / r['grad_cython_s']:>7.1f}x {diff:>9.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
