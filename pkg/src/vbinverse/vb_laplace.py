"""Outlier-robust coordinate ascent with Laplace noise.

Laplace noise is written as a Gaussian scale mixture: datum ``j`` has
precision ``w_j`` whose reciprocal is exponential with mean ``tau``.  The
factor for ``w`` is a product of inverse-Gaussian distributions, ``lam``
keeps its Gamma factor, and ``tau`` is re-estimated by empirical Bayes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .forward import ForwardStack
from .prior import TruncatedPrior
from .vb_gaussian import (
    LOG_2PI,
    GammaFactor,
    GaussianFactor,
    expect_prior_quadratic,
    expect_residual_vector,
    prior_energy_terms,
    projected_operator,
    relative_change,
    update_lambda,
    weighted_gaussian_update,
)

RESIDUAL_FLOOR = 1e-30


@dataclass(frozen=True, eq=False)
class InvGaussFactor:
    """Independent ``IG(m_j, zeta)`` components; ``zeta`` is the shared shape."""

    means: np.ndarray
    shape: float

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if not np.all(np.isfinite(means)) or np.any(means <= 0):
            raise ValueError("inverse-Gaussian means must be finite and positive")
        if not self.shape > 0:
            raise ValueError("inverse-Gaussian shape must be positive")
        object.__setattr__(self, "means", means)

    def mean(self) -> np.ndarray:
        return self.means

    def mean_reciprocal(self) -> np.ndarray:
        return 1.0 / self.means + 1.0 / self.shape


@dataclass(frozen=True)
class LaplaceHyper:
    alpha0: float = 1.0
    beta0: float = 1e-1
    tau_init: float = 1e-7


def update_u_weighted(stack: ForwardStack, d, prior: TruncatedPrior, lam: float, weights, method="dense") -> GaussianFactor:
    """Gaussian factor with precision ``H* W H + C0(lam)^-1`` and mean ``C (H* W d + C0(lam)^-1 u0)``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (stack.n_data,)).copy()
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise ValueError("weights must be finite and strictly positive")
    G = projected_operator(stack, prior.eigsys)
    return weighted_gaussian_update(G, stack, d, prior, lam, weights, method)


def expect_residual_componentwise(factor: GaussianFactor, stack: ForwardStack, d, G=None) -> np.ndarray:
    """``E[(H u - d)_j^2] = (H u* - d)_j^2 + (H C H^T)_jj``."""
    return expect_residual_vector(factor, stack, d, G)


def update_weights(e_res_vec, tau: float, floor: float = RESIDUAL_FLOOR) -> InvGaussFactor:
    """``m_j = sqrt(2 / (tau E[(Hu-d)_j^2]))`` and ``zeta = 2 / tau``.

    Expected residuals are floored at ``floor`` so exact fits give large but
    finite weights.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau!r}")
    e = np.maximum(np.asarray(e_res_vec, dtype=float), floor)
    return InvGaussFactor(np.sqrt(2.0 / (tau * e)), 2.0 / tau)


def update_tau_empirical(w_factor: InvGaussFactor) -> float:
    """``tau = mean_j(1 / m_j) + 1 / zeta``."""
    return float(np.mean(1.0 / w_factor.means) + 1.0 / w_factor.shape)


def elbo_laplace(
    u_factor: GaussianFactor,
    lam_factor: GammaFactor,
    w_factor: InvGaussFactor,
    tau: float,
    stack: ForwardStack,
    d,
    prior: TruncatedPrior,
    hyper: LaplaceHyper,
    G=None,
) -> float:
    """Evidence lower bound at fixed ``tau``, up to a constant.

    The ``E[log w]`` contributions of the likelihood, the mixing prior and
    the inverse-Gaussian entropy cancel exactly, which leaves a closed form.
    """
    e = expect_residual_vector(u_factor, stack, d, G)
    m, zeta = w_factor.means, w_factor.shape
    per_datum = (
        -0.5 * LOG_2PI
        - 0.5 * m * e
        - np.log(tau)
        - w_factor.mean_reciprocal() / tau
        - 0.5 * np.log(zeta / (2.0 * np.pi))
        + 0.5
    )
    return float(
        np.sum(per_datum)
        + prior_energy_terms(u_factor, prior, lam_factor)
        + lam_factor.expected_log_pdf(hyper.alpha0, hyper.beta0)
        + u_factor.entropy()
        + lam_factor.entropy()
    )


@dataclass
class LaplaceVBState:
    u_factor: GaussianFactor
    lambda_factor: GammaFactor
    w_factor: InvGaussFactor
    tau: float
    iteration: int = 0
    rel_changes: tuple = (np.inf, np.inf, np.inf)
    converged: bool = False
    elbo_trace: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)
    tau_trace: list = field(default_factory=list)
    change_trace: list = field(default_factory=list)
    mean_trace: list = field(default_factory=list)
    weight_history: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.u_factor.mean

    @property
    def weights(self) -> np.ndarray:
        return self.w_factor.means


def run_vb_laplace(
    stack: ForwardStack,
    d,
    prior: TruncatedPrior,
    hyper: Optional[LaplaceHyper] = None,
    tol: float = 1e-4,
    max_sweeps: int = 200,
    fixed_tau: Optional[float] = None,
    init: Optional[LaplaceVBState] = None,
    method: str = "dense",
) -> LaplaceVBState:
    """Coordinate ascent over ``q(u) q(lam) q(w)`` with empirical-Bayes ``tau``.

    Sweep ``k`` refreshes ``lam_k``, the weight means ``W_k`` and ``tau_k``
    from the previous factors, then updates ``q(u)``, ``q(lam)`` and
    ``q(w)``.  On the first sweep ``tau_1 = tau_init`` and ``W_1 = I / tau_1``.
    ``fixed_tau`` turns off the empirical-Bayes step.
    """
    hyper = hyper or LaplaceHyper()
    d = np.asarray(d, dtype=float)
    if d.shape != (stack.n_data,):
        raise ValueError(f"data has shape {d.shape}, stack expects ({stack.n_data},)")
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    G = projected_operator(stack, prior.eigsys)

    if init is not None:
        lam_factor = init.lambda_factor
        tau0 = init.tau
    else:
        lam_factor = GammaFactor(hyper.alpha0, hyper.beta0)
        tau0 = hyper.tau_init
    if fixed_tau is not None:
        tau0 = fixed_tau
    if not tau0 > 0:
        raise ValueError("initial tau must be positive")

    w_factor = None
    state = None
    prev = None
    for k in range(1, max_sweeps + 1):
        lam = lam_factor.mean()
        if w_factor is None:
            tau = tau0
            weights = np.full(stack.n_data, 1.0 / tau)
        else:
            tau = fixed_tau if fixed_tau is not None else update_tau_empirical(w_factor)
            weights = w_factor.mean()

        u_factor = weighted_gaussian_update(G, stack, d, prior, lam, weights, method)
        lam_factor = update_lambda(prior, hyper.alpha0, hyper.beta0, expect_prior_quadratic(u_factor, prior))
        w_factor = update_weights(expect_residual_vector(u_factor, stack, d, G), tau)

        if prev is None:
            changes = (np.inf, np.inf, np.inf)
        else:
            changes = (
                relative_change(u_factor.mean, prev[0]),
                relative_change(lam, prev[1]),
                relative_change(tau, prev[2]),
            )
        prev = (u_factor.mean, lam, tau)
        value = elbo_laplace(u_factor, lam_factor, w_factor, tau, stack, d, prior, hyper, G)

        if state is None:
            state = LaplaceVBState(u_factor, lam_factor, w_factor, tau)
        state.u_factor, state.lambda_factor, state.w_factor, state.tau = u_factor, lam_factor, w_factor, tau
        state.iteration = k
        state.rel_changes = changes
        state.elbo_trace.append(value)
        state.lambda_trace.append(lam)
        state.tau_trace.append(tau)
        state.change_trace.append(changes)
        state.mean_trace.append(u_factor.mean)
        state.weight_history.append(w_factor.means)
        if max(changes) <= tol:
            state.converged = True
            break
    return state
