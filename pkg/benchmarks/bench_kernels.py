"""Compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the shared-MAC sweep and the two convolution accumulators on both
backends, checks that they agree and prints one line per kernel.
"""

import argparse
import timeit

import numpy as np

from cutpoint.func_ref import _fallback, kernels

try:
    from cutpoint.func_ref import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    x = rng.integers(-128, 128, (32, 28, 28))
    w = rng.integers(-128, 128, (32, 32, 3, 3))
    wd = rng.integers(-128, 128, (32, 3, 3))
    return {
        "double_mac_sweep[-64,63]": lambda m: m.double_mac_sweep(-64, 63),
        "double_mac_sweep[full]": lambda m: m.double_mac_sweep(),
        "conv 32x28x28 -> 32, k3": lambda m: m.conv_accumulate(x, w, 1, 1, 1, 28, 28),
        "dwconv 32x28x28, k3": lambda m: m.dw_accumulate(x, wd, 1, 1, 1, 28, 28),
    }


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--skip-full", action="store_true",
                    help="skip the 2^24 sweep on the numpy backend")
    args = ap.parse_args()
    print(f"selected backend: {kernels.BACKEND}")
    if compiled is None:
        print("compiled extension not built; only numpy timings are shown")
    for name, fn in cases(np.random.default_rng(0)).items():
        slow_full = name.endswith("[full]") and args.skip_full
        reps = 1 if name.endswith("[full]") else args.repeat
        t_np = None if slow_full else best_time(lambda: fn(_fallback), reps)
        if compiled is None:
            if t_np is not None:
                print(f"{name:28s} numpy {t_np:9.4f}s")
            continue
        t_cy = best_time(lambda: fn(compiled), args.repeat)
        if not name.endswith("[full]"):
            a, b = fn(_fallback), fn(compiled)
            assert np.array_equal(a, b), f"backends disagree on {name}"
        np_text = "skipped" if t_np is None else f"{t_np:9.4f}s"
        ratio = "" if t_np is None else f"  speedup {t_np / t_cy:7.1f}x"
        print(f"{name:28s} numpy {np_text}  cython {t_cy:9.4f}s{ratio}")


if __name__ == "__main__":
    main()
