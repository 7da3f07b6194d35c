"""Time the tridiagonal kernel: compiled vs pure-Python backend.

``scipy.linalg.solve_banded`` is timed as a LAPACK reference.  Run with
``python benchmarks/bench_kernels.py [--sizes 200 1000 5000] [--rhs 2]``.
"""

import argparse
import timeit

import numpy as np
from scipy.linalg import solve_banded

from vbinverse import kernels


def helmholtz_system(n, kappa=20.0, n_rhs=2, seed=0):
    h = 1.0 / (n - 1)
    lower = np.full(n - 1, 1.0 / h**2, dtype=complex)
    upper = lower.copy()
    diag = np.full(n, -2.0 / h**2 + kappa**2, dtype=complex)
    diag[[0, -1]] += 1j * kappa / h  # absorbing ends keep the system nonsingular
    rhs = np.random.default_rng(seed).standard_normal((n, n_rhs)).astype(complex)
    return lower, diag, upper, rhs


def best_of(fn, repeat=5):
    number, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[200, 1000, 5000, 20000])
    parser.add_argument("--rhs", type=int, default=2)
    args = parser.parse_args(argv)

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"selected backend: {kernels.BACKEND}")
    print(f"{'n':>7s} " + " ".join(f"{b + ' [us]':>14s}" for b in backends + ["solve_banded"]) + f" {'speedup':>9s}")
    for n in args.sizes:
        lower, diag, upper, rhs = helmholtz_system(n, n_rhs=args.rhs)
        ab = np.zeros((3, n), dtype=complex)
        ab[0, 1:], ab[1], ab[2, :-1] = upper, diag, lower
        ref = solve_banded((1, 1), ab, rhs)
        times = []
        for b in backends:
            x = kernels.tridiag_solve(lower, diag, upper, rhs, backend=b)
            assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)
            times.append(best_of(lambda: kernels.tridiag_solve(lower, diag, upper, rhs, backend=b)))
        times.append(best_of(lambda: solve_banded((1, 1), ab, rhs)))
        speedup = times[0] / times[1] if len(backends) == 2 else float("nan")
        print(f"{n:7d} " + " ".join(f"{1e6 * t:14.1f}" for t in times) + f" {speedup:9.1f}x")


if __name__ == "__main__":
    main()
