"""Pure-Python Thomas sweep; same contract as the compiled ``_tridiag`` module."""

import numpy as np


def tridiag_solve(lower, diag, upper, rhs):
    """Solve ``T x = rhs`` for every column of ``rhs`` (shape ``(n, k)``). No pivoting."""
    lower = np.ascontiguousarray(lower, dtype=np.complex128)
    diag = np.ascontiguousarray(diag, dtype=np.complex128)
    upper = np.ascontiguousarray(upper, dtype=np.complex128)
    rhs = np.ascontiguousarray(rhs, dtype=np.complex128)
    n = diag.shape[0]
    if rhs.shape[0] != n or lower.shape[0] != n - 1 or upper.shape[0] != n - 1:
        raise ValueError("inconsistent tridiagonal system shapes")

    cp = np.empty(n, dtype=np.complex128)
    x = np.empty_like(rhs)
    denom = diag[0]
    if denom == 0:
        raise ZeroDivisionError("zero pivot in row 0")
    if n > 1:
        cp[0] = upper[0] / denom
    x[0] = rhs[0] / denom
    for i in range(1, n):
        denom = diag[i] - lower[i - 1] * cp[i - 1]
        if denom == 0:
            raise ZeroDivisionError(f"zero pivot in row {i}")
        if i < n - 1:
            cp[i] = upper[i] / denom
        x[i] = (rhs[i] - lower[i - 1] * x[i - 1]) / denom
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]
    return x
