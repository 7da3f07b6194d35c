"""Frequency-marching inversion.

Wavenumbers are visited from low to high.  At each one the prior is
re-centred on the previous conditional mean and a few coordinate-ascent
sweeps are run on that wavenumber's data alone.  Optionally the mean is
refined by gradient descent on the MAP objective, and the covariance work can
be delegated to a coarser grid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import SequentialAbort, VBInverseError
from .forward import ForwardStack, HelmholtzProblem, assemble_forward_stack
from .prior import TruncatedPrior, c0_lambda_inverse_quadratic, project_between_grids
from .vb_gaussian import (
    GammaFactor,
    GaussianFactor,
    GaussianHyper,
    VBState,
    expect_prior_quadratic,
    expect_residual,
    expect_residual_vector,
    projected_operator,
    run_vb_gaussian,
    update_lambda,
    update_tau,
    weighted_gaussian_update,
)
from .vb_laplace import (
    InvGaussFactor,
    LaplaceHyper,
    LaplaceVBState,
    run_vb_laplace,
    update_tau_empirical,
    update_weights,
)

__all__ = [
    "FrequencySchedule",
    "FrequencyStep",
    "SequentialResult",
    "run_sequential",
    "map_objective",
    "map_gradient",
    "map_gradient_descent",
    "project_between_grids",
]


@dataclass(frozen=True)
class FrequencySchedule:
    wavenumbers: tuple
    inner_sweeps: int = 3
    inner_model: str = "gaussian"

    def __post_init__(self):
        kappas = np.atleast_1d(np.asarray(self.wavenumbers, dtype=float))
        if kappas.size == 0 or np.any(kappas <= 0) or np.any(np.diff(kappas) <= 0):
            raise ValueError("schedule wavenumbers must be positive and strictly increasing")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be >= 1")
        if self.inner_model not in ("gaussian", "laplace"):
            raise ValueError(f"unknown inner model {self.inner_model!r}")
        object.__setattr__(self, "wavenumbers", tuple(float(k) for k in kappas))


@dataclass
class FrequencyStep:
    wavenumber: float
    mean: np.ndarray
    prior_mean: np.ndarray
    rel_error: float
    lambda_mean: float
    tau_mean: float


@dataclass
class SequentialResult:
    per_frequency: list = field(default_factory=list)
    final_state: Union[VBState, LaplaceVBState, None] = None

    @property
    def mean(self) -> np.ndarray:
        return self.per_frequency[-1].mean

    @property
    def errors(self) -> np.ndarray:
        return np.array([s.rel_error for s in self.per_frequency])


def _as_weights(tau, n):
    w = np.broadcast_to(np.asarray(tau, dtype=float), (n,))
    if np.any(w < 0):
        raise ValueError("tau / weights must be non-negative")
    return w


def map_objective(u, stack: ForwardStack, d, u_prev, lam, tau, prior: TruncatedPrior) -> float:
    """``(tau/2) ||H u - d||^2 + ||u - u_prev||^2_{C0^K(lam)}``.

    ``tau`` may be a vector of per-datum weights.
    """
    r = stack.apply(u) - np.asarray(d, dtype=float)
    w = _as_weights(tau, r.size)
    return float(0.5 * np.sum(w * r * r) + c0_lambda_inverse_quadratic(np.asarray(u) - u_prev, prior, lam))


def map_gradient(u, stack: ForwardStack, d, u_prev, lam, tau, prior: TruncatedPrior) -> np.ndarray:
    """Gradient of :func:`map_objective` in the grid inner product.

    Equals ``tau H*(H u - d) + 2 C0^K(lam)^-1 (u - u_prev)``; the derivative
    with respect to nodal values is this vector times the grid spacing.
    """
    r = stack.apply(u) - np.asarray(d, dtype=float)
    w = _as_weights(tau, r.size)
    s = prior.variances(lam)
    c = prior.eigsys.coefficients(np.asarray(u) - u_prev)
    return stack.adjoint(w * r) + 2.0 * prior.eigsys.synthesize(c / s)


def _hessian_bound(stack, prior, lam, w, precondition, n_iter=20, seed=0):
    """Largest Hessian eigenvalue by power iteration, in the metric the descent uses."""
    G = projected_operator(stack, prior.eigsys)
    s = prior.variances(lam)
    if precondition:
        F = G * np.sqrt(s)
        op = lambda z: F.T @ (w * (F @ z)) + 2.0 * z
    else:
        op = lambda z: G.T @ (w * (G @ z)) + 2.0 * z / s
    z = np.random.default_rng(seed).standard_normal(s.size)
    est = 0.0
    for _ in range(n_iter):
        y = op(z)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            break
        z = y / est
    return max(est, float(np.max(2.0 / s)) if not precondition else 2.0)


def map_gradient_descent(
    u_init,
    stack: ForwardStack,
    d,
    u_prev,
    lam: float,
    tau,
    prior: TruncatedPrior,
    steps: int = 200,
    step_size: Optional[float] = None,
    precondition: bool = True,
    history: Optional[list] = None,
) -> np.ndarray:
    """Fixed-step gradient descent on :func:`map_objective`; returns the best iterate.

    With ``precondition`` the gradient is mapped through ``C0^K(lam)`` before
    stepping.  The default step is ``1/L`` with ``L`` a 20-step power
    iteration estimate of the largest Hessian eigenvalue in that metric.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    d = np.asarray(d, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    w = _as_weights(tau, stack.n_data)
    if step_size is None:
        step_size = 1.0 / _hessian_bound(stack, prior, lam, w, precondition)
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    s = prior.variances(lam)
    E = prior.eigsys

    u = np.array(u_init, dtype=float)
    best_u, best_J = u.copy(), map_objective(u, stack, d, u_prev, lam, w, prior)
    if not np.isfinite(best_J):
        raise VBInverseError("non-finite MAP objective at the initial point")
    if history is not None:
        history.append(best_J)
    for _ in range(steps):
        g = map_gradient(u, stack, d, u_prev, lam, w, prior)
        if precondition:
            g = E.synthesize(s * E.coefficients(g))
        u = u - step_size * g
        with np.errstate(over="ignore", invalid="ignore"):
            J = map_objective(u, stack, d, u_prev, lam, w, prior)
        if not np.isfinite(J):
            raise VBInverseError(f"MAP objective became non-finite (step size {step_size:.3e})")
        if history is not None:
            history.append(J)
        if J < best_J:
            best_J, best_u = J, u.copy()
    return best_u


def _relative_error(u, truth):
    if truth is None:
        return float("nan")
    return float(np.max(np.abs(u - truth)) / np.max(np.abs(truth)))


def _validate_data(schedule: FrequencySchedule, data):
    pairs = list(data)
    if len(pairs) != len(schedule.wavenumbers):
        raise ValueError(
            f"schedule has {len(schedule.wavenumbers)} wavenumbers but {len(pairs)} data vectors were given"
        )
    out = []
    for kappa, (k_data, d) in zip(schedule.wavenumbers, pairs):
        if not np.isclose(kappa, k_data):
            raise ValueError(f"data for kappa={k_data} supplied where the schedule expects kappa={kappa}")
        out.append(np.asarray(d, dtype=float))
    return out


def _checkpoint_path(directory, index):
    return Path(directory) / f"freq_{index:04d}.npz"


def _save_checkpoint(directory, index, step: FrequencyStep, state):
    path = _checkpoint_path(directory, index)
    tmp = path.with_name(path.stem + ".tmp.npz")
    tau_params = (
        [state.tau_factor.shape, state.tau_factor.rate]
        if isinstance(state, VBState)
        else [update_tau_empirical(state.w_factor), np.nan]
    )
    np.savez(
        tmp,
        index=index,
        wavenumber=step.wavenumber,
        mean=step.mean,
        prior_mean=step.prior_mean,
        rel_error=step.rel_error,
        lambda_params=[state.lambda_factor.shape, state.lambda_factor.rate],
        tau_params=tau_params,
    )
    os.replace(tmp, path)


def _load_checkpoints(directory, schedule):
    """Completed frequencies on disk as ``(step, (lambda factor, tau params))`` pairs."""
    out = []
    for i, kappa in enumerate(schedule.wavenumbers):
        path = _checkpoint_path(directory, i)
        if not path.exists():
            break
        with np.load(path) as z:
            if not np.isclose(float(z["wavenumber"]), kappa):
                raise ValueError(f"checkpoint {path} belongs to a different schedule")
            lam = GammaFactor(*z["lambda_params"])
            tp = z["tau_params"].copy()
            tau_mean = float(tp[0] / tp[1]) if np.isfinite(tp[1]) else float(tp[0])
            step = FrequencyStep(kappa, z["mean"].copy(), z["prior_mean"].copy(), float(z["rel_error"]),
                                 lam.mean(), tau_mean)
        out.append((step, (lam, tp)))
    return out


def _warm_state(model, last):
    """Minimal state carrying hyperparameter factors into the next frequency."""
    if last is None:
        return None
    lam, tp = last
    if model == "gaussian":
        return VBState(None, lam, GammaFactor(*tp))
    return LaplaceVBState(None, lam, None, float(tp[0]))


def _laplace_warm(state: LaplaceVBState):
    return LaplaceVBState(None, state.lambda_factor, None, update_tau_empirical(state.w_factor))


def _two_grid_frequency(model, schedule, fine_stack, coarse_stack, d, fine_prior, coarse_prior, hyper, warm,
                        map_steps, map_step_size):
    """Inner sweeps with the covariance on the coarse grid and the mean refined on the fine grid."""
    Gc = projected_operator(coarse_stack, coarse_prior.eigsys)
    n = coarse_stack.n_data
    if model == "gaussian":
        lam_f = warm.lambda_factor if warm else GammaFactor(hyper.alpha0, hyper.beta0)
        tau_f = warm.tau_factor if warm else GammaFactor(hyper.alpha1, hyper.beta1)
        state = VBState(None, lam_f, tau_f)
    else:
        lam_f = warm.lambda_factor if warm else GammaFactor(hyper.alpha0, hyper.beta0)
        tau = warm.tau if warm else hyper.tau_init
        state = LaplaceVBState(None, lam_f, None, tau)
    w_f = None
    u_fine = fine_prior.u0.copy()
    for k in range(1, schedule.inner_sweeps + 1):
        lam = state.lambda_factor.mean()
        if model == "gaussian":
            tau = state.tau_factor.mean()
            weights = np.full(n, tau)
        else:
            tau = state.tau if w_f is None else update_tau_empirical(w_f)
            weights = np.full(n, 1.0 / tau) if w_f is None else w_f.mean()
        factor = weighted_gaussian_update(Gc, coarse_stack, d, coarse_prior, lam, weights)
        if k == 1 or map_steps == 0:
            u_fine = project_between_grids(factor.mean, coarse_prior.grid, fine_prior.grid)
        else:
            u_fine = map_gradient_descent(u_fine, fine_stack, d, fine_prior.u0, lam, weights, fine_prior,
                                          steps=map_steps, step_size=map_step_size)
            mean_c = project_between_grids(u_fine, fine_prior.grid, coarse_prior.grid)
            factor = GaussianFactor(mean_c, factor.cov_sqrt, factor.eigsys, factor.logdet)
        state.u_factor = factor
        state.lambda_factor = update_lambda(coarse_prior, hyper.alpha0, hyper.beta0,
                                            expect_prior_quadratic(factor, coarse_prior))
        if model == "gaussian":
            state.tau_factor = update_tau(n, hyper.alpha1, hyper.beta1, expect_residual(factor, coarse_stack, d, Gc))
        else:
            w_f = update_weights(expect_residual_vector(factor, coarse_stack, d, Gc), tau)
            state.w_factor, state.tau = w_f, tau
        state.iteration = k
    return state, u_fine


def run_sequential(
    problem: HelmholtzProblem,
    schedule: FrequencySchedule,
    d_per_freq: Sequence,
    prior: TruncatedPrior,
    hyper=None,
    tol: float = 0.0,
    truth=None,
    initial_guess=None,
    map_steps: int = 0,
    map_step_size: Optional[float] = None,
    coarse_prior: Optional[TruncatedPrior] = None,
    checkpoint_dir=None,
) -> SequentialResult:
    """March through ``schedule`` re-centring the prior on the last conditional mean.

    ``d_per_freq`` is a sequence of ``(wavenumber, data)`` pairs in schedule
    order.  Each frequency runs ``schedule.inner_sweeps`` sweeps (``tol``
    may stop them earlier) with hyperparameter factors carried over from the
    previous frequency.  ``coarse_prior`` moves the covariance work to a
    coarser grid; ``map_steps > 0`` then refines the mean by gradient descent
    on the MAP objective on the inversion grid.  With ``checkpoint_dir`` every
    finished frequency is written to disk and a rerun resumes after the last
    complete one.
    """
    data = _validate_data(schedule, d_per_freq)
    model = schedule.inner_model
    if hyper is None:
        hyper = GaussianHyper() if model == "gaussian" else LaplaceHyper()
    if prior.grid != problem.grid:
        raise ValueError("prior and problem grids differ")
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
    two_grid = coarse_prior is not None and coarse_prior.grid != prior.grid
    if map_steps and not two_grid:
        coarse_prior = prior
        two_grid = True
    coarse_problem = problem.on_grid(coarse_prior.grid) if two_grid else None

    mean = prior.u0.copy() if initial_guess is None else np.asarray(initial_guess, dtype=float).copy()
    result = SequentialResult()
    start = 0
    warm = None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        # the final frequency is always recomputed so that final_state exists
        done = _load_checkpoints(checkpoint_dir, schedule)[: len(schedule.wavenumbers) - 1]
        if done:
            result.per_frequency.extend(step for step, _ in done)
            start = len(done)
            mean = done[-1][0].mean.copy()
            warm = _warm_state(model, done[-1][1])

    for i in range(start, len(schedule.wavenumbers)):
        kappa = schedule.wavenumbers[i]
        try:
            single = problem.with_wavenumbers((kappa,))
            stack = assemble_forward_stack(single)
            if data[i].shape != (stack.n_data,):
                raise ValueError(f"data for kappa={kappa} has {data[i].size} entries, expected {stack.n_data}")
            local_prior = prior.with_mean(mean)
            if two_grid:
                cstack = assemble_forward_stack(coarse_problem.with_wavenumbers((kappa,)))
                cprior = coarse_prior.with_mean(project_between_grids(mean, prior.grid, coarse_prior.grid))
                state, new_mean = _two_grid_frequency(model, schedule, stack, cstack, data[i], local_prior, cprior,
                                                      hyper, warm, map_steps, map_step_size)
            elif model == "gaussian":
                state = run_vb_gaussian(stack, data[i], local_prior, hyper, tol=tol,
                                        max_sweeps=schedule.inner_sweeps, init=warm)
                new_mean = state.mean
            else:
                state = run_vb_laplace(stack, data[i], local_prior, hyper, tol=tol,
                                       max_sweeps=schedule.inner_sweeps, init=warm)
                new_mean = state.mean
        except (VBInverseError, np.linalg.LinAlgError) as exc:
            raise SequentialAbort(kappa, result, exc) from exc

        if model == "gaussian":
            tau_mean = state.tau_factor.mean()
            warm = VBState(None, state.lambda_factor, state.tau_factor)
        else:
            tau_mean = state.tau
            warm = _laplace_warm(state)
        step = FrequencyStep(kappa, new_mean.copy(), mean.copy(), _relative_error(new_mean, truth),
                             state.lambda_factor.mean(), tau_mean)
        result.per_frequency.append(step)
        if checkpoint_dir is not None:
            _save_checkpoint(checkpoint_dir, i, step, state)
        mean = new_mean
        result.final_state = state
    return result

