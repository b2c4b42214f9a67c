"""Compare the numba-jitted kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mexfuse import kernels


def time_fn(fn, args, repeats):
    fn(*args)  # warm-up (triggers JIT compilation on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    if not kernels._HAS_NUMBA:
        raise SystemExit("numba unavailable; nothing to compare")

    rng = np.random.default_rng(0)
    cases = {
        "matmul 16x256 @ 256x256": (rng.standard_normal((16, 256)),
                                    rng.standard_normal((256, 256))),
        "matmul 256x256 @ 256x256": (rng.standard_normal((256, 256)),
                                     rng.standard_normal((256, 256))),
        "softmax_rows 256x256": (rng.standard_normal((256, 256)),),
        "softmax_rows 16x4096": (rng.standard_normal((16, 4096)),),
    }
    pairs = {
        "matmul": (kernels._nb_matmul, kernels.matmul2d_numpy),
        "softmax": (kernels._nb_softmax_rows, kernels.softmax_rows2d_numpy),
    }
    print(f"{'case':<28} {'numba (ms)':>12} {'numpy (ms)':>12} {'numba/numpy':>12}")
    for name, data in cases.items():
        nb, np_ = pairs["matmul" if name.startswith("matmul") else "softmax"]
        t_nb = time_fn(nb, data, args.repeats) * 1e3
        t_np = time_fn(np_, data, args.repeats) * 1e3
        print(f"{name:<28} {t_nb:>12.4f} {t_np:>12.4f} {t_nb / t_np:>12.2f}")


if __name__ == "__main__":
    main()
