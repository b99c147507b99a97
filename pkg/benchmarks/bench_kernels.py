"""Time kernel_matrix on the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--n 1000 2000] [--repeat 3]

Prints one line per (kernel, n, backend) with the best wall time and the
max abs difference between backends.
"""
import argparse
import time

import numpy as np

from specbias import _accel
from specbias.data import sample_sphere
from specbias.kernels import Gaussian, Laplace, NtkRelu, kernel_matrix


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, nargs="+", default=[500, 1000, 2000])
    ap.add_argument("--d", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    specs = [Laplace(1.0), Gaussian(1.0), NtkRelu(3, 1.0, 1e-2)]
    for spec in specs:
        for n in args.n:
            X = sample_sphere(args.d, n, seed=0)
            results = {}
            for name in backends:
                with _accel.use_backend(name):
                    kernel_matrix(spec, X.points[:8])  # warm-up / jit compile
                    results[name] = best_time(lambda: kernel_matrix(spec, X), args.repeat)
            diff = 0.0
            if len(results) == 2:
                diff = float(np.max(np.abs(results["numba"][1] - results["numpy"][1])))
            line = "  ".join(f"{b}={results[b][0] * 1e3:8.1f}ms" for b in backends)
            print(f"{type(spec).__name__:10s} n={n:5d}  {line}  max|diff|={diff:.1e}")


if __name__ == "__main__":
    main()
