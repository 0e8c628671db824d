"""Run a configuration over many seeds and print per-iteration medians.

Usage: python scripts/seed_study.py configs/shipped.json --seeds 20 [--workers 8]

For every seed the trajectory metrics are recorded, plus ``V_hat`` of the
reference measure on the same evaluation samples. The medians correspond to
the decrement and convergence-proxy statistics.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from stochbary.config import build_problem, load_run_config
from stochbary.fixed_point import evaluate_trials, run
from stochbary.rng import Stream


def one_seed(args):
    path, seed = args
    cfg = load_run_config(path)
    problem, _ = build_problem(cfg)
    state = run(problem, cfg.schedule, cfg.iterations, cfg.eval.per_iteration(), Stream(seed))
    _, ref = evaluate_trials(state.chain.prefix(0), problem, cfg.eval.n_eval, 1, Stream(seed))
    return [r.V_hat for r in state.metrics], [r.W2_to_ref for r in state.metrics], ref[0]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--workers", type=int, default=min(8, os.cpu_count() or 1))
    args = parser.parse_args()
    jobs = [(args.config, s) for s in range(args.seeds)]
    with ProcessPoolExecutor(args.workers) as pool:
        results = list(pool.map(one_seed, jobs))
    v = np.array([r[0] for r in results])
    w2 = np.array([r[1] for r in results])
    ref = np.array([r[2] for r in results])
    print("t,median_V_hat,median_W2_ref")
    for t in range(v.shape[1]):
        print(f"{t},{np.median(v[:, t]):.6g},{np.median(w2[:, t]):.6g}")
    print(f"median V_hat(reference) = {np.median(ref):.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
