"""Compare the compiled and NumPy solver kernels.

Times the per-server block solve, the energy-ball projection and a full
ADMM run on the 4 x 10 reference scenario with each backend.

    python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from feiopt import admm, kernels
from feiopt.scenario import paper_analog


def block_args(rng, m=10):
    dim = 2 * m
    return (
        rng.uniform(-0.5, 1.5, dim), 1.0, rng.uniform(0, 0.3, dim), rng.uniform(0.2, 3, dim),
        rng.uniform(-1, 0.5, dim), rng.uniform(0.2, 1, dim), rng.uniform(0.3, 1.2, m), 0.5, 4.0,
    )


def ball_args(rng, n=80):
    return rng.uniform(0, 5, n), rng.uniform(0.05, 2, n), rng.uniform(0.1, 3, n), 1.0


def bench(label, fn, repeat, number):
    t = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
    print(f"  {label:<28s} {t * 1e6:12.1f} us")
    return t


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    blk, ball = block_args(rng), ball_args(rng)
    cfg = paper_analog()
    times = {}
    for backend in kernels.available_backends():
        print(f"backend: {backend}")
        times[backend] = (
            bench("solve_block (20 coords)", lambda: kernels.solve_block(*blk, backend=backend), args.repeat, 200),
            bench("project_ball (80 coords)", lambda: kernels.project_ball(*ball, backend=backend), args.repeat, 200),
            bench("admm.run (4 x 10)", lambda: admm.run(cfg, admm.AdmmOptions(backend=backend, record_trace=False)),
                  args.repeat, 1),
        )
    if len(times) == 2:
        print("speed-up of compiled over NumPy:")
        for label, c, p in zip(("solve_block", "project_ball", "admm.run"), times["cython"], times["python"]):
            print(f"  {label:<28s} {p / c:8.1f}x")
    else:
        print("compiled kernels not built; only the NumPy backend was timed")


if __name__ == "__main__":
    main()
