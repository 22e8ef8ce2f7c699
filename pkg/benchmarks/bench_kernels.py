"""Compare the compiled edit-distance kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--n 20] [--modes 60] [--batch 4096]
"""

import argparse
import timeit

import numpy as np

from flgfn import kernels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=120, help="string length")
    ap.add_argument("--modes", type=int, default=60)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    modes = rng.integers(0, 2, (args.modes, args.n), dtype=np.uint8)
    xs = rng.integers(0, 2, (args.batch, args.n), dtype=np.uint8)
    print(f"backend={kernels.BACKEND} n={args.n} modes={args.modes} batch={args.batch}")

    cases = {
        "pair/python": lambda: kernels.py_edit_distance(xs[0], modes[0]),
        "min/python": lambda: kernels.py_min_edit_distance(xs[0], modes),
        "batch/numpy": lambda: kernels.py_min_edit_distance_batch(xs, modes),
    }
    if kernels.BACKEND == "cython":
        cases["pair/cython"] = lambda: kernels.edit_distance(xs[0], modes[0])
        cases["min/cython"] = lambda: kernels.min_edit_distance(xs[0], modes)
        cases["batch/cython"] = lambda: kernels.min_edit_distance_batch(xs, modes)
        got = kernels.min_edit_distance_batch(xs, modes)
        assert np.array_equal(got, kernels.py_min_edit_distance_batch(xs, modes))

    for name, fn in sorted(cases.items()):
        number = 1 if "python" in name or "numpy" in name else 20
        best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
        print(f"{name:14s} {best * 1e3:10.3f} ms")


if __name__ == "__main__":
    main()
