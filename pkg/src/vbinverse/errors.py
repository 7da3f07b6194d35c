"""Exception types raised by the solvers.

Argument problems raise the builtin :class:`ValueError`; the classes here are
reserved for numerical failures that carry diagnostic payloads.
"""


class VBInverseError(RuntimeError):
    """Base class for numerical failures in this package."""


class EigenSolveError(VBInverseError):
    """The tridiagonal eigensolver did not converge."""


class ResonanceError(VBInverseError):
    """The discrete Helmholtz operator is singular at the requested wavenumber."""

    def __init__(self, kappa, detail=""):
        self.kappa = kappa
        msg = f"discrete Helmholtz system is singular at kappa={kappa!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class IndefinitePrecisionError(VBInverseError):
    """A posterior precision failed its Cholesky factorization."""

    def __init__(self, min_eigenvalue):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"posterior precision is not positive definite "
            f"(smallest eigenvalue {min_eigenvalue:.3e})"
        )


class NonConvergenceError(VBInverseError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )


class SequentialAbort(VBInverseError):
    """A frequency step failed; ``partial`` holds the steps completed so far."""

    def __init__(self, kappa, partial, cause):
        self.kappa = kappa
        self.partial = partial
        super().__init__(f"sequential inversion failed at kappa={kappa}: {cause}")
