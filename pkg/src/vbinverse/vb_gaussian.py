"""Mean-field coordinate ascent for the Gaussian-noise hierarchical model.

The unknown is ``u = u0 + sum_j c_j e_j`` with prior ``c_j ~ N(0, s_j)``
where ``s_j = alpha_j / lam`` for the first ``K`` modes and ``alpha_j``
beyond.  The prior precision scale ``lam`` and the noise precision ``tau``
carry Gamma hyperpriors.  The approximate posterior factorizes as
``q(u) q(lam) q(tau)`` with a Gaussian and two Gamma factors, each updated
in closed form given the other two.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import digamma, gammaln

from .errors import IndefinitePrecisionError, NonConvergenceError
from .forward import ForwardStack
from .prior import EigenSystem, TruncatedPrior

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GammaFactor:
    """Gamma distribution with density proportional to ``x^(shape-1) exp(-rate x)``."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma parameters must be positive, got ({self.shape}, {self.rate})")

    def mean(self) -> float:
        return self.shape / self.rate

    def mean_log(self) -> float:
        return float(digamma(self.shape) - np.log(self.rate))

    def entropy(self) -> float:
        a, b = self.shape, self.rate
        return float(a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a))

    def expected_log_pdf(self, shape0: float, rate0: float) -> float:
        """``E_q[log Gamma(x; shape0, rate0)]`` under this factor."""
        return float(
            shape0 * np.log(rate0)
            - gammaln(shape0)
            + (shape0 - 1.0) * self.mean_log()
            - rate0 * self.mean()
        )


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    """Gaussian factor for ``u`` stored in prior-eigenbasis coordinates.

    ``cov_sqrt`` is a square root ``L`` of the coefficient covariance
    (``Cov(c) = L L^T``).  The nodal covariance is ``E L L^T E^T`` with
    ``E`` the stored eigenvectors.
    """

    mean: np.ndarray
    cov_sqrt: np.ndarray
    eigsys: EigenSystem
    logdet: Optional[float] = None

    @classmethod
    def from_coeff_cov(cls, eigsys: EigenSystem, mean, coeff_cov) -> "GaussianFactor":
        coeff_cov = np.asarray(coeff_cov, dtype=float)
        w, v = np.linalg.eigh(0.5 * (coeff_cov + coeff_cov.T))
        w = np.clip(w, 0.0, None)
        logdet = float(np.sum(np.log(w))) if np.all(w > 0) else -np.inf
        return cls(np.asarray(mean, dtype=float), v * np.sqrt(w), eigsys, logdet)

    @classmethod
    def from_nodal_cov(cls, eigsys: EigenSystem, mean, nodal_cov) -> "GaussianFactor":
        """Exact when ``nodal_cov`` lives on the span of the stored modes."""
        h = eigsys.grid.h
        E = eigsys.eigvecs
        return cls.from_coeff_cov(eigsys, mean, h * h * E.T @ np.asarray(nodal_cov) @ E)

    def coeff_cov(self) -> np.ndarray:
        return self.cov_sqrt @ self.cov_sqrt.T

    def coeff_var(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.cov_sqrt, self.cov_sqrt)

    def basis_diag(self, K: int) -> np.ndarray:
        """``<e_j, C e_j>`` for the first ``K`` modes."""
        return self.coeff_var()[:K]

    def nodal_sqrt(self) -> np.ndarray:
        return self.eigsys.eigvecs @ self.cov_sqrt

    def nodal_cov(self) -> np.ndarray:
        S = self.nodal_sqrt()
        return S @ S.T

    def pointwise_var(self) -> np.ndarray:
        S = self.nodal_sqrt()
        return np.einsum("ij,ij->i", S, S)

    def log_det(self) -> float:
        """Log-determinant of the coefficient covariance."""
        if self.logdet is not None:
            return self.logdet
        sign, val = np.linalg.slogdet(self.coeff_cov())
        return float(val) if sign > 0 else -np.inf

    def entropy(self) -> float:
        m = self.cov_sqrt.shape[0]
        return 0.5 * m * (1.0 + LOG_2PI) + 0.5 * self.log_det()

    def sample(self, rng, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.cov_sqrt.shape[1]))
        return self.mean + z @ self.nodal_sqrt().T


@dataclass(frozen=True)
class GaussianHyper:
    alpha0: float = 1.0
    beta0: float = 1e-1
    alpha1: float = 1.0
    beta1: float = 1e-5


def projected_operator(stack: ForwardStack, eigsys: EigenSystem) -> np.ndarray:
    """``G = H E``: forward map acting on prior-eigenbasis coefficients."""
    if stack.grid != eigsys.grid:
        raise ValueError("forward stack and prior live on different grids")
    return stack.matrix @ eigsys.eigvecs


class CGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual: float


def cg_solve(
    matvec: Callable,
    rhs,
    tol: float = 1e-10,
    max_iter: Optional[int] = None,
    precond: Optional[Callable] = None,
    x0=None,
) -> CGResult:
    """Preconditioned conjugate gradients for a symmetric positive-definite map.

    Stops once ``||A x - rhs|| <= tol * ||rhs||``.  Raises
    :class:`NonConvergenceError` if ``max_iter`` (default ``10 * n``) is hit.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    b = np.asarray(rhs, dtype=float)
    if max_iter is None:
        max_iter = 10 * b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            raise IndefinitePrecisionError(pAp / float(p @ p))
        step = rz / pAp
        x += step * p
        r -= step * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return CGResult(x, it, res)
        z = precond(r) if precond is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergenceError(max_iter, res)


def _check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")


def _whitened_cholesky(F, weights):
    """Lower Cholesky factor of ``I + F^T W F``."""
    m = F.shape[1]
    M = F.T @ (weights[:, None] * F)
    M[np.diag_indices(m)] += 1.0
    try:
        return cholesky(M, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        w = np.linalg.eigvalsh(0.5 * (M + M.T)) if np.all(np.isfinite(M)) else [np.nan]
        raise IndefinitePrecisionError(float(np.min(w))) from None


def weighted_gaussian_update(
    G, stack: ForwardStack, d, prior: TruncatedPrior, lam: float, weights, method="dense", cg_tol=1e-12
) -> GaussianFactor:
    """Gaussian factor with precision ``H* W H + C0(lam)^-1`` (``W`` diagonal).

    Works in whitened coordinates ``c = S^(1/2) z`` so the factored matrix
    ``I + S^(1/2) G^T W G S^(1/2)`` has all eigenvalues >= 1.
    """
    s = prior.variances(lam)
    sq = np.sqrt(s)
    F = G * sq
    R = _whitened_cholesky(F, weights)
    # Cov(c) = D R^-T R^-1 D with D = diag(sqrt(s))
    Rinv_T = solve_triangular(R, np.eye(R.shape[0]), lower=True, trans="T")
    cov_sqrt = sq[:, None] * Rinv_T
    logdet = float(np.sum(np.log(s)) - 2.0 * np.sum(np.log(np.diag(R))))

    resid0 = np.asarray(d, dtype=float) - stack.apply(prior.u0)
    rhs = G.T @ (weights * resid0)
    if method == "dense":
        coeff_mean = cov_sqrt @ (cov_sqrt.T @ rhs)
    elif method == "cg":
        coeff_mean = cg_solve(
            lambda c: G.T @ (weights * (G @ c)) + c / s, rhs, tol=cg_tol, precond=lambda r: s * r
        ).x
    else:
        raise ValueError(f"unknown method {method!r}")
    mean = prior.u0 + prior.eigsys.synthesize(coeff_mean)
    return GaussianFactor(mean, cov_sqrt, prior.eigsys, logdet)


def update_u(
    stack: ForwardStack, d, prior: TruncatedPrior, lam: float, tau: float, method: str = "dense"
) -> GaussianFactor:
    """Optimal Gaussian factor given ``E[lam]`` and ``E[tau]``.

    Precision ``tau H* H + C0(lam)^-1``, mean
    ``C (tau H* d + C0(lam)^-1 u0)``.  ``method="cg"`` computes the mean by
    prior-preconditioned conjugate gradients instead of the dense factor.
    """
    _check_positive(lam, "lambda")
    _check_positive(tau, "tau")
    G = projected_operator(stack, prior.eigsys)
    weights = np.full(stack.n_data, float(tau))
    return weighted_gaussian_update(G, stack, d, prior, lam, weights, method)


def normal_equation_operators(stack: ForwardStack, d, prior: TruncatedPrior, lam: float, tau: float):
    """``(matvec, rhs, precond)`` of the mean equation in eigen-coefficients.

    ``matvec`` applies ``tau H* H + C0(lam)^-1`` through the forward stack
    and eigenbasis without forming ``H* H``; ``precond`` applies ``C0(lam)``.
    """
    s = prior.variances(lam)
    E = prior.eigsys.eigvecs

    def matvec(c):
        return tau * (E.T @ stack.matrix.T @ stack.apply(E @ c)) + c / s

    rhs = tau * (E.T @ stack.matrix.T @ (np.asarray(d, dtype=float) - stack.apply(prior.u0)))
    return matvec, rhs, (lambda r: s * r)


def _coeff_offsets(factor: GaussianFactor, prior: TruncatedPrior) -> np.ndarray:
    return prior.eigsys.coefficients(factor.mean - prior.u0)


def expect_prior_quadratic(factor: GaussianFactor, prior: TruncatedPrior) -> float:
    """``E[sum_{j<=K} alpha_j^-1 <u - u0, e_j>^2]`` under ``factor``."""
    K = prior.K
    c = _coeff_offsets(factor, prior)[:K]
    return float(np.sum((c * c + factor.basis_diag(K)) / prior.alphas[:K]))


def _expect_tail_quadratic(factor: GaussianFactor, prior: TruncatedPrior) -> float:
    K = prior.K
    c = _coeff_offsets(factor, prior)[K:]
    return float(np.sum((c * c + factor.coeff_var()[K:]) / prior.alphas[K:]))


def expect_residual_vector(factor: GaussianFactor, stack: ForwardStack, d, G=None) -> np.ndarray:
    """``E[(H u - d)_j^2]`` for every datum."""
    if G is None:
        G = projected_operator(stack, factor.eigsys)
    r = stack.apply(factor.mean) - np.asarray(d, dtype=float)
    GL = G @ factor.cov_sqrt
    return r * r + np.einsum("ij,ij->i", GL, GL)


def expect_residual(factor: GaussianFactor, stack: ForwardStack, d, G=None) -> float:
    """``E||H u - d||^2 = ||H u* - d||^2 + Tr(H C H^T)``."""
    return float(np.sum(expect_residual_vector(factor, stack, d, G)))


def update_lambda(prior: TruncatedPrior, alpha0: float, beta0: float, e_quad: float) -> GammaFactor:
    return GammaFactor(alpha0 + 0.5 * prior.K, beta0 + 0.5 * e_quad)


def update_tau(n_data: int, alpha1: float, beta1: float, e_res: float) -> GammaFactor:
    return GammaFactor(alpha1 + 0.5 * n_data, beta1 + 0.5 * e_res)


def noise_std_estimate(tau_factor: GammaFactor) -> float:
    return float(np.sqrt(1.0 / tau_factor.mean()))


def prior_energy_terms(factor: GaussianFactor, prior: TruncatedPrior, lam_factor: GammaFactor) -> float:
    """``E[log p(c | lam)]`` (Lebesgue density in eigen-coefficients)."""
    m = prior.eigsys.n_modes
    K = prior.K
    return float(
        -0.5 * m * LOG_2PI
        - 0.5 * np.sum(np.log(prior.alphas))
        + 0.5 * K * lam_factor.mean_log()
        - 0.5 * lam_factor.mean() * expect_prior_quadratic(factor, prior)
        - 0.5 * _expect_tail_quadratic(factor, prior)
    )


def elbo_gaussian(
    u_factor: GaussianFactor,
    lam_factor: GammaFactor,
    tau_factor: GammaFactor,
    stack: ForwardStack,
    d,
    prior: TruncatedPrior,
    hyper: GaussianHyper,
    G=None,
) -> float:
    """Evidence lower bound up to an additive constant shared by all factor choices."""
    n = stack.n_data
    e_res = expect_residual(u_factor, stack, d, G)
    likelihood = 0.5 * n * (tau_factor.mean_log() - LOG_2PI) - 0.5 * tau_factor.mean() * e_res
    return float(
        likelihood
        + prior_energy_terms(u_factor, prior, lam_factor)
        + lam_factor.expected_log_pdf(hyper.alpha0, hyper.beta0)
        + tau_factor.expected_log_pdf(hyper.alpha1, hyper.beta1)
        + u_factor.entropy()
        + lam_factor.entropy()
        + tau_factor.entropy()
    )


@dataclass
class VBState:
    u_factor: GaussianFactor
    lambda_factor: GammaFactor
    tau_factor: GammaFactor
    iteration: int = 0
    rel_changes: tuple = (np.inf, np.inf, np.inf)
    converged: bool = False
    elbo_trace: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)
    tau_trace: list = field(default_factory=list)
    change_trace: list = field(default_factory=list)
    mean_trace: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.u_factor.mean

    @property
    def sigma_hat(self) -> float:
        return noise_std_estimate(self.tau_factor)


def elbo(state: VBState, stack: ForwardStack, d, prior: TruncatedPrior, hyper: GaussianHyper) -> float:
    return elbo_gaussian(state.u_factor, state.lambda_factor, state.tau_factor, stack, d, prior, hyper)


def relative_change(new, old) -> float:
    new = np.atleast_1d(np.asarray(new, dtype=float))
    old = np.atleast_1d(np.asarray(old, dtype=float))
    diff = np.linalg.norm(new - old)
    size = np.linalg.norm(new)
    if diff == 0.0:
        return 0.0
    return float(diff / size) if size > 0 else np.inf


def run_vb_gaussian(
    stack: ForwardStack,
    d,
    prior: TruncatedPrior,
    hyper: Optional[GaussianHyper] = None,
    tol: float = 1e-4,
    max_sweeps: int = 200,
    fixed_lambda: Optional[float] = None,
    fixed_tau: Optional[float] = None,
    init: Optional[VBState] = None,
    method: str = "dense",
) -> VBState:
    """Coordinate ascent over ``q(u) q(lam) q(tau)``.

    Each sweep takes ``lam_k, tau_k`` as the means of the previous Gamma
    factors (the hyperpriors on the first sweep, or the factors of ``init``),
    updates ``q(u)``, then both Gamma factors.  Iteration stops when the
    largest relative change of ``u_k``, ``lam_k`` and ``tau_k`` is at most
    ``tol``; hitting ``max_sweeps`` leaves ``converged`` False.

    ``fixed_lambda`` / ``fixed_tau`` pin the corresponding moment; the ELBO
    trace is then recorded as NaN since the bound is no longer defined.
    """
    hyper = hyper or GaussianHyper()
    d = np.asarray(d, dtype=float)
    if d.shape != (stack.n_data,):
        raise ValueError(f"data has shape {d.shape}, stack expects ({stack.n_data},)")
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    G = projected_operator(stack, prior.eigsys)

    if init is not None:
        lam_factor, tau_factor = init.lambda_factor, init.tau_factor
    else:
        lam_factor = GammaFactor(hyper.alpha0, hyper.beta0)
        tau_factor = GammaFactor(hyper.alpha1, hyper.beta1)

    state = None
    prev = None
    for k in range(1, max_sweeps + 1):
        lam = fixed_lambda if fixed_lambda is not None else lam_factor.mean()
        tau = fixed_tau if fixed_tau is not None else tau_factor.mean()
        u_factor = weighted_gaussian_update(
            G, stack, d, prior, lam, np.full(stack.n_data, float(tau)), method
        )
        lam_factor = update_lambda(prior, hyper.alpha0, hyper.beta0, expect_prior_quadratic(u_factor, prior))
        tau_factor = update_tau(stack.n_data, hyper.alpha1, hyper.beta1, expect_residual(u_factor, stack, d, G))

        if prev is None:
            changes = (np.inf, np.inf, np.inf)
        else:
            changes = (
                relative_change(u_factor.mean, prev[0]),
                relative_change(lam, prev[1]),
                relative_change(tau, prev[2]),
            )
        prev = (u_factor.mean, lam, tau)

        if fixed_lambda is None and fixed_tau is None:
            value = elbo_gaussian(u_factor, lam_factor, tau_factor, stack, d, prior, hyper, G)
        else:
            value = np.nan

        if state is None:
            state = VBState(u_factor, lam_factor, tau_factor)
        state.u_factor, state.lambda_factor, state.tau_factor = u_factor, lam_factor, tau_factor
        state.iteration = k
        state.rel_changes = changes
        state.elbo_trace.append(value)
        state.lambda_trace.append(lam)
        state.tau_trace.append(tau)
        state.change_trace.append(changes)
        state.mean_trace.append(u_factor.mean)
        if max(changes) <= tol:
            state.converged = True
            break
    return state
