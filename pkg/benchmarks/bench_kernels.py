"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the median wall time per call for each backend, the speed ratio, and
the largest absolute difference between the two results.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from eegleak import _kernels as K


def cases(rng):
    x = rng.normal(size=(64, 4, 300))
    w = rng.normal(size=(16, 4, 7))
    b = rng.normal(size=16)
    x2 = rng.normal(size=(64, 16, 147))
    w2 = rng.normal(size=(16, 16, 5))
    dy = rng.normal(size=(64, 16, 147))
    s = np.sort(rng.normal(size=5000))
    y = rng.integers(0, 2, size=5000)
    return {
        "conv1d_forward 64x4x300 k7 s2": lambda be: K.conv1d_forward(x, w, b, 2, backend=be),
        "conv1d_forward 64x16x147 k5 s2": lambda be: K.conv1d_forward(x2, w2, b, 2, backend=be),
        "conv1d_backward 64x4x300 k7 s2": lambda be: K.conv1d_backward(x, w, dy, 2, backend=be),
        "roc_auc_sorted n=5000": lambda be: K.roc_auc_sorted(s, y, backend=be),
        "sens_at_spec_sorted n=5000": lambda be: K.sens_at_spec_sorted(s[::-1].copy(), y[::-1].copy(),
                                                                       0.99, backend=be),
    }


def max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if K.BACKEND != "cython":
        print("compiled kernels unavailable; only the numpy fallback can be timed")
    backends = ["numpy"] + (["cython"] if K.BACKEND == "cython" else [])
    print(f"{'kernel':<34}" + "".join(f"{b + ' ms':>12}" for b in backends)
          + (f"{'speedup':>10}{'max |diff|':>12}" if len(backends) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for be in backends:
            fn(be)
            number = 3
            times[be] = 1e3 * np.median(timeit.repeat(lambda: fn(be), number=number,
                                                      repeat=args.repeat)) / number
        row = f"{name:<34}" + "".join(f"{times[b]:>12.3f}" for b in backends)
        if len(backends) == 2:
            row += f"{times['numpy'] / times['cython']:>9.1f}x{max_diff(fn('numpy'), fn('cython')):>12.1e}"
        print(row)


if __name__ == "__main__":
    main()
