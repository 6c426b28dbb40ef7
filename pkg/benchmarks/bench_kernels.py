"""Time each kernel on both backends at benchmark sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the median wall time per call and the speedup of
the compiled backend over the numpy fallback.
"""
import argparse
import timeit

import numpy as np

from emac import kernels


def cases(rng):
    field = rng.random((16, 64, 64))
    flow = rng.uniform(-4, 4, (16, 64, 64, 2))
    cur, prev = rng.random((2, 64, 64))
    pts = rng.uniform(0, 64, (20, 2))
    return {
        "warp_bilinear 16x64x64": lambda m: m.warp_bilinear(field, flow),
        "warp_adjoint 16x64x64": lambda m: m.warp_bilinear_adjoint(field, flow),
        "blockmatch 64x64 b8 r8": lambda m: m.blockmatch(cur, prev, 8, 8, 8),
        "rasterize 20 pts 64x64": lambda m: m.rasterize(pts, 64, 64, 6.0, 4.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    mods = kernels.backends()
    rng = np.random.default_rng(0)
    names = sorted(mods)
    print(f"{'kernel':<26}" + "".join(f"{n + ' ms':>12}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng).items():
        times = {}
        for n in names:
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(mods[n]), number=1), 1e-6)))
            runs = timeit.repeat(lambda: fn(mods[n]), number=number, repeat=args.repeat)
            times[n] = 1e3 * float(np.median(runs)) / number
        row = f"{label:<26}" + "".join(f"{times[n]:>12.3f}" for n in names)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>10.1f}x"
        print(row)
    if len(names) == 1:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
