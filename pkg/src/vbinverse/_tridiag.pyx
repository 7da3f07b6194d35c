# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Thomas sweep for complex tridiagonal systems."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def tridiag_solve(const double complex[::1] lower,
                  const double complex[::1] diag,
                  const double complex[::1] upper,
                  const double complex[:, ::1] rhs):
    """Solve ``T x = rhs`` for every column of ``rhs`` (shape ``(n, k)``).

    ``lower[i]`` couples row ``i + 1`` to column ``i``; ``upper[i]`` couples
    row ``i`` to column ``i + 1``.  No pivoting.
    """
    cdef Py_ssize_t n = diag.shape[0]
    cdef Py_ssize_t k = rhs.shape[1]
    cdef Py_ssize_t i, j
    cdef double complex denom, factor

    if rhs.shape[0] != n or lower.shape[0] != n - 1 or upper.shape[0] != n - 1:
        raise ValueError("inconsistent tridiagonal system shapes")

    cdef double complex[::1] cp = np.empty(n, dtype=np.complex128)
    x_arr = np.empty((n, k), dtype=np.complex128)
    cdef double complex[:, ::1] x = x_arr

    if diag[0] == 0:
        raise ZeroDivisionError("zero pivot in row 0")
    denom = diag[0]
    if n > 1:
        cp[0] = upper[0] / denom
    for j in range(k):
        x[0, j] = rhs[0, j] / denom

    for i in range(1, n):
        denom = diag[i] - lower[i - 1] * cp[i - 1]
        if denom == 0:
            raise ZeroDivisionError(f"zero pivot in row {i}")
        if i < n - 1:
            cp[i] = upper[i] / denom
        factor = lower[i - 1]
        for j in range(k):
            x[i, j] = (rhs[i, j] - factor * x[i - 1, j]) / denom

    for i in range(n - 2, -1, -1):
        factor = cp[i]
        for j in range(k):
            x[i, j] = x[i, j] - factor * x[i + 1, j]
    return x_arr
