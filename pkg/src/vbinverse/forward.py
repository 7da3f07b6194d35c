"""1D Helmholtz forward model for the inverse source problem.

Solves ``v'' + kappa^2 (1 + q) v = u_s`` on an interval with absorbing
conditions ``v'(a) = -i kappa v(a)`` and ``v'(b) = i kappa v(b)``, measures the
field at chosen nodes, and stacks real and imaginary parts over several
wavenumbers into one real matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ResonanceError
from .kernels import tridiag_solve
from .prior import Grid1D


def two_bumps(x):
    return 0.5 * np.exp(-300.0 * (x - 0.4) ** 2) + 0.5 * np.exp(-300.0 * (x - 0.6) ** 2)


def zero_profile(x):
    return np.zeros_like(np.asarray(x, dtype=float))


TRUTH_PROFILES = {"two-bumps": two_bumps}
MEDIUM_PROFILES = {"zero": zero_profile}


@dataclass(frozen=True)
class HelmholtzProblem:
    grid: Grid1D
    wavenumbers: tuple
    meas_points: tuple = None
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        kappas = np.atleast_1d(np.asarray(self.wavenumbers, dtype=float))
        if kappas.size == 0 or np.any(kappas <= 0) or np.any(np.diff(kappas) <= 0):
            raise ValueError("wavenumbers must be positive and strictly increasing")
        object.__setattr__(self, "wavenumbers", tuple(float(k) for k in kappas))

        points = (0, self.grid.n_nodes - 1) if self.meas_points is None else self.meas_points
        points = tuple(int(p) for p in points)
        if not points or any(p < 0 or p >= self.grid.n_nodes for p in points):
            raise ValueError(f"measurement points must be node indices in [0, {self.grid.n_nodes})")
        object.__setattr__(self, "meas_points", points)

        q = np.zeros(self.grid.n_nodes) if self.q is None else np.asarray(self.q, dtype=float)
        if q.shape != (self.grid.n_nodes,) or not np.all(np.isfinite(q)):
            raise ValueError("q must be a finite real grid vector")
        object.__setattr__(self, "q", q)

    def with_wavenumbers(self, wavenumbers) -> "HelmholtzProblem":
        return HelmholtzProblem(self.grid, tuple(wavenumbers), self.meas_points, self.q)

    def on_grid(self, grid: Grid1D) -> "HelmholtzProblem":
        """Same physical setup on another grid; measurement nodes keep their positions."""
        from .prior import project_between_grids

        old = self.grid.nodes
        points = tuple(int(np.argmin(np.abs(grid.nodes - old[p]))) for p in self.meas_points)
        q = project_between_grids(self.q, self.grid, grid)
        return HelmholtzProblem(grid, self.wavenumbers, points, q)


def _system(problem: HelmholtzProblem, kappa: float):
    """Tridiagonal (lower, diag, upper) after eliminating the one-sided boundary stencils.

    Rows are scaled by 1/h^2 so the right-hand side is ``B @ source`` with
    ``B`` the identity except that boundary rows pick up the neighbouring
    interior source value.
    """
    n = problem.grid.n_nodes
    h = problem.grid.h
    h2 = h * h
    k2 = kappa * kappa * (1.0 + problem.q)

    lower = np.full(n - 1, 1.0 / h2, dtype=np.complex128)
    upper = np.full(n - 1, 1.0 / h2, dtype=np.complex128)
    diag = (-2.0 / h2 + k2).astype(np.complex128)

    # second-order one-sided derivative at each end, combined with the
    # neighbouring interior row to remove the third unknown
    edge = (-2.0 + 2.0j * h * kappa) / h2
    diag[0] = edge
    upper[0] = (2.0 + h2 * k2[1]) / h2
    diag[-1] = edge
    lower[-1] = (2.0 + h2 * k2[-2]) / h2
    return lower, diag, upper


def _source_rhs(source):
    rhs = np.array(source, dtype=np.complex128)
    rhs[0] = source[1]
    rhs[-1] = source[-2]
    return rhs


def _check_kappa(kappa):
    if not kappa > 0:
        raise ValueError(f"wavenumber must be positive, got {kappa!r}")


def _solve(lower, diag, upper, rhs, kappa):
    try:
        x = tridiag_solve(lower, diag, upper, rhs)
    except ZeroDivisionError as exc:
        raise ResonanceError(kappa, str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise ResonanceError(kappa, "non-finite solution")
    return x


def _tri_matvec(lower, diag, upper, x):
    y = diag[:, None] * x if x.ndim == 2 else diag * x
    y[:-1] += (upper[:, None] * x[1:]) if x.ndim == 2 else upper * x[1:]
    y[1:] += (lower[:, None] * x[:-1]) if x.ndim == 2 else lower * x[:-1]
    return y


def solve_helmholtz_1d(problem: HelmholtzProblem, source, kappa: float) -> np.ndarray:
    """Complex nodal field radiated by a real nodal ``source`` at wavenumber ``kappa``."""
    _check_kappa(kappa)
    source = np.asarray(source, dtype=float)
    if source.shape != (problem.grid.n_nodes,):
        raise ValueError("source must be a grid vector")
    lower, diag, upper = _system(problem, kappa)
    rhs = _source_rhs(source)
    v = _solve(lower, diag, upper, rhs, kappa)
    scale = np.max(np.abs(rhs))
    if scale > 0:
        resid = np.max(np.abs(_tri_matvec(lower, diag, upper, v) - rhs)) / scale
        if resid > 1e-6:
            raise ResonanceError(kappa, f"residual {resid:.2e}")
    return v


@dataclass(frozen=True)
class ForwardStack:
    """Real stacked measurement operator.

    Rows are ordered by wavenumber, then real parts at every measurement
    point, then imaginary parts.  ``apply`` is the nodal matrix product and
    ``adjoint`` the transpose with respect to the grid inner product.
    """

    matrix: np.ndarray
    grid: Grid1D
    wavenumbers: tuple
    meas_points: tuple
    kappa_rows: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[1] != self.grid.n_nodes:
            raise ValueError("matrix must have one column per grid node")
        object.__setattr__(self, "matrix", matrix)
        if self.kappa_rows is None:
            per = 2 * len(self.meas_points)
            object.__setattr__(self, "kappa_rows", np.repeat(np.arange(len(self.wavenumbers)), per))

    @property
    def n_data(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_complex_obs(self) -> int:
        return self.n_data // 2

    def apply(self, u) -> np.ndarray:
        return self.matrix @ np.asarray(u, dtype=float)

    def adjoint(self, d) -> np.ndarray:
        return self.matrix.T @ np.asarray(d, dtype=float) / self.grid.h

    def layout(self) -> list:
        """``(wavenumber, node index, 're' | 'im')`` for every row."""
        rows = []
        for kappa in self.wavenumbers:
            for part in ("re", "im"):
                rows.extend((kappa, p, part) for p in self.meas_points)
        return rows

    def select(self, indices: Sequence[int]) -> "ForwardStack":
        """Sub-stack holding the wavenumbers at positions ``indices``."""
        indices = list(indices)
        mask = np.isin(self.kappa_rows, indices)
        remap = {old: new for new, old in enumerate(indices)}
        return ForwardStack(
            self.matrix[mask],
            self.grid,
            tuple(self.wavenumbers[i] for i in indices),
            self.meas_points,
            np.array([remap[i] for i in self.kappa_rows[mask]], dtype=int),
        )

    def rows_for(self, index: int) -> np.ndarray:
        return np.flatnonzero(self.kappa_rows == index)


def empty_stack(grid: Grid1D) -> ForwardStack:
    """A stack with no data rows (prior-only inference)."""
    return ForwardStack(np.zeros((0, grid.n_nodes)), grid, (), (), np.zeros(0, dtype=int))


def assemble_forward_stack(problem: HelmholtzProblem) -> ForwardStack:
    """Explicit matrix of the multi-frequency measurement map.

    Each wavenumber costs one tridiagonal solve with the transposed system
    and one right-hand side per measurement point.
    """
    n = problem.grid.n_nodes
    points = list(problem.meas_points)
    n_pts = len(points)
    selector = np.zeros((n, n_pts), dtype=np.complex128)
    selector[points, np.arange(n_pts)] = 1.0

    blocks = []
    for kappa in problem.wavenumbers:
        lower, diag, upper = _system(problem, kappa)
        y = _solve(upper, diag, lower, selector, kappa)  # transposed system
        rows = y.T.copy()
        # transpose of the boundary-row source substitution
        rows[:, 1] += rows[:, 0]
        rows[:, -2] += rows[:, -1]
        rows[:, 0] = 0.0
        rows[:, -1] = 0.0
        blocks.append(rows.real)
        blocks.append(rows.imag)
    matrix = np.vstack(blocks)
    if not np.all(np.isfinite(matrix)):
        raise ResonanceError(float("nan"), "non-finite forward matrix")
    return ForwardStack(matrix, problem.grid, problem.wavenumbers, problem.meas_points)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0
    r: float = 0.0
    eps_mag: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "impulsive"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "impulsive":
            if not 0.0 <= self.r <= 1.0:
                raise ValueError("corruption probability r must lie in [0, 1]")
            if self.eps_mag < 0:
                raise ValueError("corruption magnitude must be non-negative")


def generate_data(stack: ForwardStack, truth, noise: NoiseSpec, row_scale=None):
    """Noisy synthetic data ``d`` and the corruption mask (None for Gaussian noise).

    ``row_scale`` multiplies the noise amplitude row by row, e.g. to make the
    noise level relative to each wavenumber's data magnitude.
    """
    clean = stack.apply(truth)
    scale = 1.0 if row_scale is None else np.broadcast_to(np.asarray(row_scale, dtype=float), clean.shape)
    rng = np.random.default_rng(noise.seed)
    if noise.kind == "gaussian":
        return clean + scale * noise.sigma * rng.standard_normal(clean.size), None
    corrupted = rng.random(clean.size) < noise.r
    xi = rng.uniform(-1.0, 1.0, clean.size)
    return np.where(corrupted, clean + scale * noise.eps_mag * xi, clean), corrupted


def per_wavenumber_scale(stack: ForwardStack, d_clean) -> np.ndarray:
    """Row vector holding ``max |d_clean|`` over each wavenumber's block."""
    d_clean = np.asarray(d_clean, dtype=float)
    out = np.empty_like(d_clean)
    for i in range(len(stack.wavenumbers)):
        rows = stack.rows_for(i)
        out[rows] = data_magnitude_scale(d_clean[rows])
    return out


def data_magnitude_scale(d_clean) -> float:
    d_clean = np.asarray(d_clean, dtype=float)
    if d_clean.size == 0:
        raise ValueError("empty data vector")
    return float(np.max(np.abs(d_clean)))
