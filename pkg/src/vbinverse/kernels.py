"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; setting
``VBINVERSE_PURE_PYTHON=1`` forces the pure-Python implementation.
"""

import os

import numpy as np

from . import _tridiag_py

BACKEND = "python"
_impl = _tridiag_py

if os.environ.get("VBINVERSE_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _tridiag as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def tridiag_solve(lower, diag, upper, rhs, backend=None):
    """Solve a complex tridiagonal system for one or many right-hand sides.

    ``rhs`` may be 1D (single system) or 2D with one column per system.
    ``backend`` picks ``"cython"`` or ``"python"`` explicitly; the default
    is whatever was selected at import.
    """
    impl = _impl
    if backend == "python":
        impl = _tridiag_py
    elif backend == "cython":
        if BACKEND != "cython":
            raise ImportError("compiled kernel is not available")
        impl = _compiled
    elif backend is not None:
        raise ValueError(f"unknown backend {backend!r}")

    rhs = np.asarray(rhs)
    squeeze = rhs.ndim == 1
    rhs2 = np.ascontiguousarray(rhs.reshape(rhs.shape[0], -1), dtype=np.complex128)
    x = impl.tridiag_solve(
        np.ascontiguousarray(lower, dtype=np.complex128),
        np.ascontiguousarray(diag, dtype=np.complex128),
        np.ascontiguousarray(upper, dtype=np.complex128),
        rhs2,
    )
    x = np.asarray(x)
    return x[:, 0] if squeeze else x
