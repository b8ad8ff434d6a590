"""Numba vs numpy timings for the hot kernels and one end-to-end BSDE solve.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Kernel timings compare both code paths in one process. The end-to-end row
runs a child interpreter per backend, because MFSMP_DISABLE_NUMBA is read at
import time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mfsmp import _kernels as kr

E2E = """
import time
from mfsmp import make_problem, simulate_forward, solve_quadratic_mf_bsde, TimeGrid, backend
p = make_problem("spike-test")
g = TimeGrid({steps}, p.horizon)
ens = simulate_forward(p, 1.0, g, {n}, 0)
solve_quadratic_mf_bsde(p, ens)
t = time.perf_counter()
sol = solve_quadratic_mf_bsde(p, ens)
print(backend(), time.perf_counter() - t, repr(sol.Y0))
"""


def cases(rng):
    n, m, d = 64, 20_000, 10
    K = rng.standard_normal((n, n))
    v = rng.standard_normal(n)
    A = rng.standard_normal((n, m))
    B = rng.standard_normal((m, n))
    X = rng.standard_normal((m, d))
    y = rng.standard_normal(m)
    Pi = rng.standard_normal((n, 6))
    return {
        "row_mean 64x64": ("row_mean", (K, v)),
        "col_mean 64x64": ("col_mean", (K, v)),
        "matmul_mean 64x20000x64": ("matmul_mean", (A, B)),
        "gram 20000x10": ("gram", (X, y)),
        "xty 20000x10": ("xty", (X, X)),
        "tensor_design 64x6": ("tensor_design", (Pi, Pi)),
    }


def bench(fn, args, repeat):
    fn(*args)  # compile / warm up
    t = timeit.Timer(lambda: fn(*args))
    loops, _ = t.autorange()
    return min(t.repeat(repeat, loops)) / loops


def end_to_end(steps, n):
    out = {}
    for disable in ("0", "1"):
        env = dict(os.environ, MFSMP_DISABLE_NUMBA=disable)
        res = subprocess.run([sys.executable, "-c", E2E.format(steps=steps, n=n)], env=env,
                             capture_output=True, text=True, check=True)
        name, secs, y0 = res.stdout.split()
        out[name] = (float(secs), float(y0))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--particles", type=int, default=20_000)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not kr.HAVE_NUMBA:
        sys.exit("numba is unavailable or disabled; unset MFSMP_DISABLE_NUMBA to compare")

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':28s} {'numpy [us]':>12s} {'numba [us]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for label, (name, a) in cases(rng).items():
        f_np, f_nb = getattr(kr, f"_{name}_np"), getattr(kr, f"_{name}_nb")
        t_np, t_nb = bench(f_np, a, args.repeat), bench(f_nb, a, args.repeat)
        r_np, r_nb = f_np(*a), f_nb(*a)
        if isinstance(r_np, tuple):
            diff = max(float(np.max(np.abs(x - y))) for x, y in zip(r_np, r_nb))
        else:
            diff = float(np.max(np.abs(r_np - r_nb)))
        rows.append({"kernel": label, "numpy_s": t_np, "numba_s": t_nb, "max_abs_diff": diff})
        print(f"{label:28s} {t_np * 1e6:12.1f} {t_nb * 1e6:12.1f} {t_np / t_nb:8.2f} {diff:10.1e}")

    e2e = end_to_end(args.steps, args.particles)
    print(f"\nsolve_quadratic_mf_bsde spike-test, N_t={args.steps}, N={args.particles}")
    for name, (secs, y0) in e2e.items():
        print(f"  {name:6s} {secs:8.3f} s   Y0={y0!r}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "end_to_end": e2e}, fh, indent=2)


if __name__ == "__main__":
    main()
