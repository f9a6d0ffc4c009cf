"""Time the numba and pure-numpy kernels on the same workload.

    python benchmarks/bench_kernels.py [--targets 20] [--target-len 30] [--query-len 10] [--repeat 3]

Each backend is warmed up once (numba compiles on first call), then the
best of ``--repeat`` runs is reported per kernel.
"""

import argparse
import time

import numpy as np

from melmatch import backend
from melmatch.lattice import backward, compile_model, emissions, forward, viterbi
from melmatch.model import build_target_model
from melmatch.simulate import (
    SimulationConfig,
    default_corpus_stats,
    generate_database,
    moderate_error_params,
    sample_query,
    target_events,
)
from melmatch.training import accumulate_counts


def workload(n_targets, target_len, query_len, seed=0):
    params = moderate_error_params()
    cfg = SimulationConfig(database_size=n_targets, rng_seed=seed, target_length_range=(target_len, target_len))
    targets = [target_events(t) for t in generate_database(default_corpus_stats(), cfg)]
    rng = np.random.default_rng(seed)
    jobs = []
    for tgt in targets:
        m = build_target_model(tgt, params.L, params.M)
        q = sample_query(tgt, params, 1, query_len, rng).query
        cm = compile_model(m, params)
        jobs.append((m, q, cm, emissions(cm, q)))
    return params, jobs


def kernels(params):
    return {
        "forward": lambda m, q, cm, em: forward(m, params, q, cm=cm, em=em),
        "backward": lambda m, q, cm, em: backward(m, params, q, cm=cm, em=em),
        "viterbi": lambda m, q, cm, em: viterbi(m, params, q, all_starts=True, cm=cm, em=em),
        "counts": lambda m, q, cm, em: accumulate_counts(m, params, q),
    }


def best_time(fn, jobs, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for job in jobs:
            fn(*job)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--targets", type=int, default=20)
    ap.add_argument("--target-len", type=int, default=30)
    ap.add_argument("--query-len", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    params, jobs = workload(args.targets, args.target_len, args.query_len)
    names = backend.available()
    results = {}
    for b in names:
        backend.use(b)
        for k, fn in kernels(params).items():
            fn(*jobs[0])  # warm-up / JIT compile
            results[b, k] = best_time(fn, jobs, args.repeat)

    print(f"{args.targets} targets x {args.target_len} notes, query {args.query_len} notes, best of {args.repeat}")
    print(f"{'kernel':<10}" + "".join(f"{b:>12}" for b in names) + ("     speedup" if len(names) > 1 else ""))
    for k in kernels(params):
        row = f"{k:<10}" + "".join(f"{results[b, k]:>11.3f}s" for b in names)
        if len(names) > 1:
            row += f"{results['numpy', k] / results['numba', k]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
