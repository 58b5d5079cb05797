"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --d 1024 65536 --repeat 20
"""
import argparse
import math
import timeit

import numpy as np

from qsparse import kernels


def cases(d, rng):
    x = rng.standard_normal(d)
    u = rng.random(d)
    norm = float(np.linalg.norm(x))
    lo, hi = float(x.min()), float(x.max())
    n = 1 << (d - 1).bit_length()
    y = rng.standard_normal(n)
    k = max(1, d // 100)
    return {
        f"top_k (k={k})": lambda m: m.top_k_indices(x, k),
        "qsgd_round (s=15)": lambda m: m.qsgd_round(x, norm, 15, u),
        "levels_round (s=8)": lambda m: m.levels_round(x, lo, hi, (hi - lo) / 8, 8, u),
        f"fwht (n={n})": lambda m: m.fwht(y.copy(), 1.0 / math.sqrt(n)),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--d", type=int, nargs="+", default=[1024, 65536])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the fallback is timed")
    rng = np.random.default_rng(args.seed)
    names = list(impls)
    print(f"{'kernel':<24}{'d':>8}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for d in args.d:
        for label, fn in cases(d, rng).items():
            times = {}
            for name, mod in impls.items():
                fn(mod)  # warm up
                best = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
                times[name] = best * 1e6
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{label:<24}{d:>8}" + "".join(f"{times[n]:>16.1f}" for n in names) + f"{speed:>10.1f}")


if __name__ == "__main__":
    main()
