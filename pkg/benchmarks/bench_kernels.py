"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints median wall time per call for each kernel and backend, and the
speedup of the compiled build.
"""

import argparse
import statistics
import time

import numpy as np

from ttcal import _pykernels

try:
    from ttcal import _kernels
except ImportError:
    _kernels = None


def _cases(rng):
    x = rng.standard_normal((256, 16))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    dist = rng.uniform(0, 2, 200_000)
    pos = (rng.random(dist.size) < 0.1).astype(np.uint8)
    grid = np.round(np.arange(201) * 0.01, 10)
    y = rng.random(5000)
    w = np.ones_like(y)
    n, h = 64, 256
    u, v = rng.standard_normal((n, h)), rng.standard_normal((n, h))
    b1, w2 = rng.standard_normal(h), rng.standard_normal(h)
    dlogit = rng.standard_normal((n, n))
    return {
        "pairwise_distances (256x16)": ("pairwise_distances", (x,)),
        "threshold_counts (200k pairs)": ("threshold_counts", (dist, pos, grid)),
        "pava (5000)": ("pava", (y, w)),
        "pair_mlp_forward (64 nodes, 256 hidden)": ("pair_mlp_forward", (u, v, b1, w2, 0.1)),
        "pair_mlp_backward (64 nodes, 256 hidden)": ("pair_mlp_backward", (u, v, b1, w2, dlogit)),
    }


def _time(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<42}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for label, (name, fargs) in _cases(rng).items():
        py = _time(getattr(_pykernels, name), fargs, args.repeat)
        if _kernels is None:
            print(f"{label:<42}{py * 1e3:>11.3f}{'n/a':>11}{'':>9}")
            continue
        cy = _time(getattr(_kernels, name), fargs, args.repeat)
        print(f"{label:<42}{py * 1e3:>11.3f}{cy * 1e3:>11.3f}{py / cy:>8.1f}x")


if __name__ == "__main__":
    main()
