"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call compiles (or loads the on-disk cache); it is timed
separately and excluded from the per-call figures.
"""

import argparse
import time

import numpy as np

from slabserve import kernels, oracles


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _replay_inputs(n_ops):
    captured = []
    real = kernels.whole_slab_replay

    def spy(*args):
        captured.append(args)
        return real(*args)

    kernels.whole_slab_replay = spy
    try:
        oracles.fuzz_allocator(n_ops, seed=0)
    finally:
        kernels.whole_slab_replay = real
    return captured[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--ops", type=int, default=200_000, help="op count for the replay kernel")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    mu = rng.uniform(0.1, 2.0, size=3)
    proc = np.sort(rng.uniform(0.01, 0.1, size=14))
    deadlines = np.sort(rng.uniform(0.05, 0.6, size=14))
    replay = _replay_inputs(args.ops)

    cases = [
        ("grid_allocation_max (3 models, 100 units)",
         lambda: kernels.grid_allocation_max_numba(mu, 100), lambda: kernels.grid_allocation_max_numpy(mu, 100)),
        ("max_ontime_subset (14 jobs)",
         lambda: kernels.max_ontime_subset_numba(proc, deadlines), lambda: kernels.max_ontime_subset_numpy(proc, deadlines)),
        (f"whole_slab_replay ({args.ops} ops)",
         lambda: kernels.whole_slab_replay_numba(*replay), lambda: kernels.whole_slab_replay_numpy(*replay)),
    ]
    print(f"{'kernel':<44}{'compile s':>11}{'numba s':>11}{'numpy s':>11}{'speedup':>10}")
    for name, fast, slow in cases:
        t0 = time.perf_counter()
        fast()
        compile_s = time.perf_counter() - t0
        a, b = _best(fast, args.repeat), _best(slow, args.repeat)
        print(f"{name:<44}{compile_s:>11.3f}{a:>11.5f}{b:>11.5f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
