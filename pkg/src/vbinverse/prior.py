"""Gaussian prior on a 1D grid built from the eigen-system of (Id - Laplacian)^-p.

All covariance algebra is carried out in the eigenbasis.  Grid functions are
nodal vectors and the inner product is ``<u, v> = h * sum(u * v)``, so the
stored eigenvectors satisfy ``h * E.T @ E = I``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal

from .errors import EigenSolveError


class SaturationWarning(UserWarning):
    """The eigenvalue threshold is finer than the stored spectrum resolves."""


@dataclass(frozen=True)
class Grid1D:
    n_nodes: int
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if int(self.n_nodes) != self.n_nodes or self.n_nodes < 3:
            raise ValueError(f"n_nodes must be an integer >= 3, got {self.n_nodes!r}")
        if not self.b > self.a:
            raise ValueError(f"need b > a, got [{self.a}, {self.b}]")

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_nodes)

    def inner(self, u, v) -> float:
        return self.h * float(np.dot(u, v))

    def same_interval(self, other: "Grid1D") -> bool:
        return np.isclose(self.a, other.a) and np.isclose(self.b, other.b)


@dataclass(frozen=True)
class EigenSystem:
    """Leading eigenpairs of the prior covariance, sorted by decreasing eigenvalue."""

    grid: Grid1D
    eigvals: np.ndarray
    eigvecs: np.ndarray
    order: int

    @property
    def n_modes(self) -> int:
        return self.eigvals.size

    def coefficients(self, u) -> np.ndarray:
        """Return ``<u, e_j>`` for every stored mode (last axis of ``u`` is space)."""
        return self.grid.h * (np.asarray(u, dtype=float) @ self.eigvecs)

    def synthesize(self, coeffs) -> np.ndarray:
        return np.asarray(coeffs, dtype=float) @ self.eigvecs.T

    def save(self, path) -> None:
        np.savez(
            path,
            eigvals=self.eigvals,
            eigvecs=self.eigvecs,
            order=self.order,
            grid=np.array([self.grid.n_nodes, self.grid.a, self.grid.b]),
        )

    @classmethod
    def load(cls, path) -> "EigenSystem":
        with np.load(path) as data:
            n, a, b = data["grid"]
            return cls(
                grid=Grid1D(int(n), float(a), float(b)),
                eigvals=data["eigvals"].copy(),
                eigvecs=data["eigvecs"].copy(),
                order=int(data["order"]),
            )


def discrete_operator(grid: Grid1D) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of Id - Laplacian_h on the interior nodes (Dirichlet)."""
    m = grid.n_nodes - 2
    h2 = grid.h ** 2
    return np.full(m, 1.0 + 2.0 / h2), np.full(m - 1, -1.0 / h2)


def build_eigensystem(grid: Grid1D, p: int = 1, n_modes: Optional[int] = None) -> EigenSystem:
    """Eigenpairs of ``(Id - Laplacian_h)^-p`` with zero Dirichlet conditions.

    Eigenfunctions are extended by zero to the two boundary nodes and scaled
    to unit norm in the grid inner product.  ``n_modes`` defaults to every
    interior mode.
    """
    if int(p) != p or p < 1:
        raise ValueError(f"p must be a positive integer, got {p!r}")
    n_interior = grid.n_nodes - 2
    if n_modes is None:
        n_modes = n_interior
    if n_modes < 1 or n_modes > n_interior:
        raise ValueError(f"n_modes must lie in [1, {n_interior}], got {n_modes}")

    diag, off = discrete_operator(grid)
    try:
        mu, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, n_modes - 1))
    except LinAlgError as exc:
        raise EigenSolveError(str(exc)) from exc
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        raise EigenSolveError("non-positive or non-finite eigenvalue of Id - Laplacian")

    # smallest eigenvalue of Id - Laplacian is the largest covariance eigenvalue
    order = np.argsort(mu, kind="stable")
    mu, vecs = mu[order], vecs[:, order]
    # fix the sign so that each mode starts upward, like sin(j*pi*x)
    signs = np.sign(vecs[0])
    signs[signs == 0] = 1.0
    vecs = vecs * signs / np.sqrt(grid.h)

    full = np.zeros((grid.n_nodes, n_modes))
    full[1:-1] = vecs
    return EigenSystem(grid=grid, eigvals=mu ** (-float(p)), eigvecs=full, order=int(p))


def select_intrinsic_dim(eigvals, threshold: float) -> tuple[int, bool]:
    """Smallest ``k`` (1-based) with ``eigvals[k-1] / eigvals[0] < threshold``.

    Returns ``(K, saturated)``.  When no stored eigenvalue passes the test,
    all modes are returned and ``saturated`` is True (a warning is issued).
    """
    if isinstance(eigvals, EigenSystem):
        eigvals = eigvals.eigvals
    eigvals = np.asarray(eigvals, dtype=float)
    if eigvals.size == 0:
        raise ValueError("empty spectrum")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold!r}")
    below = np.flatnonzero(eigvals / eigvals[0] < threshold)
    if below.size == 0:
        warnings.warn(
            f"no stored eigenvalue ratio falls below {threshold:g}; using all "
            f"{eigvals.size} modes",
            SaturationWarning,
            stacklevel=2,
        )
        return int(eigvals.size), True
    return int(below[0]) + 1, False


@dataclass(frozen=True)
class TruncatedPrior:
    """``N(u0, C0^K(lam))``: the first ``K`` modes have their variance divided by ``lam``."""

    eigsys: EigenSystem
    K: int
    u0: np.ndarray = field(default=None)
    saturated: bool = False

    def __post_init__(self):
        if not 1 <= self.K <= self.eigsys.n_modes:
            raise ValueError(f"K must lie in [1, {self.eigsys.n_modes}], got {self.K}")
        if self.u0 is None:
            object.__setattr__(self, "u0", np.zeros(self.grid.n_nodes))
        else:
            u0 = np.asarray(self.u0, dtype=float)
            if u0.shape != (self.grid.n_nodes,):
                raise ValueError("u0 must be a grid vector")
            object.__setattr__(self, "u0", u0)

    @classmethod
    def from_threshold(cls, eigsys: EigenSystem, threshold: float, u0=None) -> "TruncatedPrior":
        K, saturated = select_intrinsic_dim(eigsys.eigvals, threshold)
        return cls(eigsys, K, u0, saturated)

    @property
    def grid(self) -> Grid1D:
        return self.eigsys.grid

    @property
    def alphas(self) -> np.ndarray:
        return self.eigsys.eigvals

    def variances(self, lam: float) -> np.ndarray:
        """Eigenvalues of ``C0^K(lam)``."""
        _check_positive(lam, "lambda")
        s = self.alphas.copy()
        s[: self.K] /= lam
        return s

    def with_mean(self, u0) -> "TruncatedPrior":
        return TruncatedPrior(self.eigsys, self.K, u0, self.saturated)


def _check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")


def c0_lambda_inverse_quadratic(u, prior: TruncatedPrior, lam: float) -> float:
    """``<u, C0^K(lam)^-1 u>`` over the stored modes (squared Cameron-Martin norm)."""
    s = prior.variances(lam)
    c = prior.eigsys.coefficients(u)
    return float(np.sum(c * c / s))


def sample_prior(prior: TruncatedPrior, lam: float, seed=None, size=None, xi=None) -> np.ndarray:
    """Draw from ``N(u0, C0^K(lam))`` by Karhunen-Loeve synthesis.

    ``xi`` overrides the standard normal coefficients (shape ``(n_modes,)``
    or ``(size, n_modes)``); otherwise they come from ``default_rng(seed)``.
    """
    sigma = np.sqrt(prior.variances(lam))
    if xi is None:
        shape = (prior.eigsys.n_modes,) if size is None else (size, prior.eigsys.n_modes)
        xi = np.random.default_rng(seed).standard_normal(shape)
    return prior.u0 + prior.eigsys.synthesize(np.asarray(xi) * sigma)


def project_between_grids(u, source: Grid1D, target: Grid1D) -> np.ndarray:
    """Piecewise-linear interpolation of nodal values onto another grid."""
    if not source.same_interval(target):
        raise ValueError(
            f"grids cover different intervals: [{source.a}, {source.b}] vs [{target.a}, {target.b}]"
        )
    u = np.asarray(u, dtype=float)
    if u.shape != (source.n_nodes,):
        raise ValueError("u does not live on the source grid")
    if source == target:
        return u.copy()
    return np.interp(target.nodes, source.nodes, u)
