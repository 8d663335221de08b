"""Compare the compiled and pure-Python Sinkhorn kernels.

    python3 benchmarks/bench_sinkhorn.py [--batch 64] [--grid 7] [--repeat 5]

Problems look like the ones the region-isolation loss builds during
training: two normalised maps on a grid x grid lattice with a spatial plus
intensity cost. Reports median wall time per batch and the max deviation
between the two backends' potentials.
"""

import argparse
import statistics
import time

import numpy as np

from avloc.ot import _fallback
from avloc.ot.backend import BACKEND, get_kernel
from avloc.ot.sinkhorn import build_cost, grid_coords, normalize_to_simplex


def make_problems(batch, grid, seed=0):
    rng = np.random.default_rng(seed)
    coords = grid_coords(grid, grid)
    a = rng.random((batch, grid * grid))
    b = rng.random((batch, grid * grid))
    P = np.stack([normalize_to_simplex(x) for x in a])
    Q = np.stack([normalize_to_simplex(1 - x) for x in b])
    C = np.stack([build_cost(x, y, coords).data for x, y in zip(a, b)])
    return np.log(P), np.log(Q), np.ascontiguousarray(C)


def time_kernel(fn, args, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--grid", type=int, default=7)
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--max-iter", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    logP, logQ, C = make_problems(args.batch, args.grid)
    call = (logP, logQ, C, args.eps, args.max_iter, 1e-6)
    t_py, (f_py, g_py, it_py, _) = time_kernel(_fallback.sinkhorn_log_batch, call, args.repeat)
    print(f"problems: {args.batch} x {args.grid * args.grid} bins, eps={args.eps}")
    print(f"python    {t_py * 1e3:9.2f} ms   iterations {int(np.max(it_py))}")
    if BACKEND != "compiled":
        print("compiled  unavailable (extension not built or disabled)")
        return
    compiled = get_kernel("compiled")
    t_c, (f_c, g_c, it_c, _) = time_kernel(compiled, call, args.repeat)
    dev = max(np.abs(f_c - f_py).max(), np.abs(g_c - g_py).max())
    print(f"compiled  {t_c * 1e3:9.2f} ms   iterations {int(np.max(it_c))}")
    print(f"speedup   {t_py / t_c:9.1f}x   max potential deviation {dev:.2e}")


if __name__ == "__main__":
    main()
