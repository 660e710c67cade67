"""Rollout throughput: numba kernel vs vectorized numpy fallback.

    python3 benchmarks/bench_rollouts.py [--n 10000] [--env two|three]

Both backends read the same uniforms, so the script also asserts that
their per-rollout outcomes are identical.
"""
import argparse
import time

import numpy as np

from robustcomm import executor as ex
from robustcomm.gridworld import build_three_agent_navigation, build_two_agent_navigation
from robustcomm.infometrics import CommModel
from robustcomm.markov_game import prepare
from robustcomm.occupancy import policy_from_occupancy, solve_baseline_lp


def timed(fn, repeat=3):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--env", choices=("two", "three"), default="two")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    build = build_two_agent_navigation if args.env == "two" else build_three_agent_navigation
    game = prepare(build())
    policy = policy_from_occupancy(game, solve_baseline_lp(game).x)
    tables = ex.build_tables(game, policy)
    backends = [b for b in ("numba", "numpy") if b != "numba" or ex.HAVE_NUMBA]

    for comm in (CommModel.full(), CommModel.none(), CommModel.bernoulli_intermittent(0.5)):
        # uniforms are shared so the timing isolates the kernels
        U = ex.rollout_uniforms(args.seed, 0, args.n, ex.DEFAULT_MAX_STEPS, game.n_agents)
        results = {}
        for b in backends:
            ex._run(tables, comm, U[:2], b, False, False)  # warm-up / compile
            dt, (o, l, _) = timed(lambda: ex._run(tables, comm, U, b, False, False))
            results[b] = (dt, o, l)
            print(f"{args.env:5s} {comm.variant:24s} {b:6s} {dt * 1e3:9.1f} ms "
                  f"{args.n / dt:12.0f} rollouts/s  rate={np.mean(o == ex.SUCCESS):.4f}")
        if len(results) == 2:
            (_, o1, l1), (_, o2, l2) = results["numba"], results["numpy"]
            assert np.array_equal(o1, o2) and np.array_equal(l1, l2), "backends disagree"
            print(f"{'':31s}speedup numba/numpy = {results['numpy'][0] / results['numba'][0]:.1f}x")


if __name__ == "__main__":
    main()
