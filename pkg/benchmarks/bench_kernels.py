"""Compare the numba and numpy backends of the hot kernels.

    python benchmarks/bench_kernels.py [--rounds N] [--repeat R]

Prints best-of-R wall time per kernel and backend, and checks that both
backends return identical results.  The first numba call (compilation or
cache load) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from speclk import _kernels


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--V", type=int, default=32)
    ap.add_argument("--K", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    C = 4
    p = rng.dirichlet(np.full(args.V, 0.5), size=(C, args.K + 1))
    q = rng.dirichlet(np.full(args.V, 0.5), size=(C, args.K))
    ctx = rng.integers(0, C, size=args.rounds)
    u = rng.random((args.rounds, 2 * args.K + 1))
    targets = rng.dirichlet(np.full(4, 0.3), size=3)

    cases = {
        "simulate_rounds": lambda b: _kernels.simulate_rounds(p, q, ctx, u, False, b),
        "simulate_rounds greedy": lambda b: _kernels.simulate_rounds(p, q, ctx, u, True, b),
        "simplex_grid V=4 n=100": lambda b: _kernels.simplex_grid_argmax(targets, 100, b),
    }
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    print(f"rounds={args.rounds} V={args.V} K={args.K} repeat={args.repeat}")
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}  identical")
    for name, fn in cases.items():
        if "numba" in backends:
            fn("numba")  # compile / load cache
        res = {b: best_time(lambda: fn(b), args.repeat) for b in backends}
        row = f"{name:<26}" + "".join(f"{res[b][0]:>11.3f}s" for b in backends)
        if "numba" in res:
            same = all(np.array_equal(x, y) for x, y in zip(res["numpy"][1], res["numba"][1]))
            row += f"{res['numpy'][0] / res['numba'][0]:>9.1f}x  {same}"
        print(row)


if __name__ == "__main__":
    main()
