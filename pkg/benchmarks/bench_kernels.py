"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--json out.json]

Each kernel runs once untimed (numba compilation, caches) and then
``--repeat`` times; the table reports the best time per call.
"""

import argparse
import json
import time

import numpy as np

from crld import kernels
from crld._accel import HAVE_NUMBA
from crld.augment import _rotation_matrix


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads():
    r = np.random.default_rng(0)
    x = r.standard_normal((64, 32, 32, 32)).astype(np.float32)
    cols = kernels.im2col_np(x, 1)
    g = r.standard_normal(cols.shape).astype(np.float32)
    img = r.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    m = _rotation_matrix(17.0, 32, 32)
    return {
        "im2col 64x32x32x32 s1": ("im2col", (x, 1)),
        "im2col 64x32x32x32 s2": ("im2col", (x, 2)),
        "col2im 64x32x32x32 s1": ("col2im", (g, 64, 32, 32, 32, 1)),
        "warp_nearest 32x32": ("warp_nearest", (img, m, 128)),
        "equalize 32x32": ("equalize", (img,)),
        "smooth3x3 32x32": ("smooth3x3", (img,)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    print(f"{'kernel':<26}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}  identical")
    for label, (name, fn_args) in workloads().items():
        f_np, f_nb = getattr(kernels, f"{name}_np"), getattr(kernels, f"{name}_nb")
        same = bool(np.array_equal(f_np(*fn_args), f_nb(*fn_args)))
        t_np = best_of(lambda: f_np(*fn_args), args.repeat)
        t_nb = best_of(lambda: f_nb(*fn_args), args.repeat)
        rows.append({"kernel": label, "numpy_s": t_np, "numba_s": t_nb, "identical": same})
        print(f"{label:<26}{t_np * 1e3:>11.3f}{t_nb * 1e3:>11.3f}{t_np / t_nb:>8.1f}x  {same}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
