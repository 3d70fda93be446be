"""Compiled vs pure-Python kernel throughput on one run.

    python3 benchmarks/bench_kernels.py [--paper-scale] [--rounds N]

Prints rounds/s and agent-steps/s per backend and checks the two traces agree.
"""

import argparse
import time

import numpy as np

from fedtd.experiments import ExperimentConfig, FamilyCache
from fedtd.fed_td import StepSchedule, run_fedtd
from fedtd.kernels import available_backends


def bench(prepared, backend, algorithm, rounds, update_mode, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        trace = run_fedtd(algorithm, prepared, StepSchedule(0.6), rounds, "markovian", 1,
                          update_mode, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paper-scale", action="store_true")
    ap.add_argument("--rounds", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if args.paper_scale:
        cfg = ExperimentConfig(n_states=100, n_actions=100, d=21, n_agents=[20], eps_p=[0.5], eps_r=[0.5])
    else:
        cfg = ExperimentConfig(n_agents=[10], eps_p=[0.5], eps_r=[0.5])
    prepared = FamilyCache(cfg).prepared(cfg.cells()[0])
    n = prepared.n_agents
    print(f"|S|={cfg.n_states} |A|={cfg.n_actions} d={cfg.d} N={n} rounds={args.rounds}")
    for algorithm in ("avg", "exp"):
        for update_mode in ("sampled", "expected"):
            results = {}
            for backend in available_backends():
                dt, trace = bench(prepared, backend, algorithm, args.rounds, update_mode, args.repeat)
                results[backend] = (dt, trace)
                print(f"{algorithm:3s} {update_mode:8s} {backend:7s} {dt * 1e3:9.2f} ms  "
                      f"{args.rounds / dt:12.0f} rounds/s  {args.rounds * n / dt:12.0f} agent-steps/s")
            if len(results) == 2:
                (d_c, t_c), (d_p, t_p) = results["cython"], results["python"]
                same = np.array_equal(t_c.err, t_p.err)
                print(f"    speedup x{d_p / d_c:.1f}, traces identical: {same}")


if __name__ == "__main__":
    main()
