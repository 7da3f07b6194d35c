"""Brute-force reference computations used to cross-check the solvers.

Nothing here is fast.  Dense posteriors are assembled from the precision
matrix, moments come from trapezoid quadrature in log-space, coordinate
updates are checked by scanning KL divergences over a parameter grid, and
expectations by plain Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats
from scipy.linalg import LinAlgError, cho_factor, cho_solve

LOG_TINY = np.log(1e-300)


def exact_gaussian_posterior(H, d, prior_mean, prior_cov, noise_prec):
    """Posterior mean and covariance of a linear-Gaussian model.

    ``d = H u + e`` with ``u ~ N(prior_mean, prior_cov)`` and ``e`` having
    precision ``noise_prec`` (a scalar or the diagonal as a vector).

    Raises
    ------
    numpy.linalg.LinAlgError
        If the prior covariance or the posterior precision is singular.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    m0 = np.asarray(prior_mean, dtype=float)
    C0 = np.asarray(prior_cov, dtype=float)
    n = m0.size
    if H.size == 0:
        H = np.zeros((0, n))
    d = np.asarray(d, dtype=float).reshape(H.shape[0])
    w = np.broadcast_to(np.asarray(noise_prec, dtype=float), (H.shape[0],))

    # assemble the precision in prior-whitened coordinates u = m0 + L z with
    # C0 = L L^T, so ill-conditioned priors do not need an explicit inverse
    C0 = 0.5 * (C0 + C0.T)
    evals, V = np.linalg.eigh(C0)
    if not evals[0] > 1e-14 * max(evals[-1], 0.0):
        raise np.linalg.LinAlgError("singular precision: prior covariance is not positive definite")
    L = V * np.sqrt(evals)
    HL = H @ L
    P = HL.T @ (w[:, None] * HL)
    P[np.diag_indices(n)] += 1.0
    try:
        cp = cho_factor(P, lower=True)
    except LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular precision: {exc}") from None
    z = cho_solve(cp, HL.T @ (w * (d - H @ m0)))
    cov = L @ cho_solve(cp, L.T)
    return m0 + L @ z, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights with ``sum(w f(x)) ~ int f(x) rho(x) dx`` over ``(0, inf)``.

    Built from a trapezoid rule in ``t = log x``; the weights carry the
    density and the Jacobian ``e^t``.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.nodes.size

    def integrate(self, f=None) -> float:
        if f is None:
            return float(np.sum(self.weights))
        return float(np.sum(self.weights * f(self.nodes)))


def _as_log_density(density, log):
    if log:
        return density

    def log_density(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(density(x))

    return log_density


def _log_integrand(log_density, t, power):
    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        g = np.asarray(log_density(np.exp(t)), dtype=float) + (power + 1) * t
    return np.where(np.isfinite(g), g, -np.inf)


def _support(log_density, powers, t_max=700.0, n_scan=28001):
    """Interval in ``t`` outside which every integrand is below 1e-300 of its peak."""
    t = np.linspace(-t_max, t_max, n_scan)
    keep = np.zeros(t.size, dtype=bool)
    for p in powers:
        g = _log_integrand(log_density, t, p)
        gmax = np.max(g)
        if not np.isfinite(gmax):
            raise ValueError("density vanishes everywhere on the scan range")
        keep |= g > gmax + LOG_TINY
    idx = np.flatnonzero(keep)
    step = t[1] - t[0]
    return t[idx[0]] - step, t[idx[-1]] + step


def build_rule(density, n_points: int, support, log: bool = False) -> QuadratureRule:
    log_density = _as_log_density(density, log)
    t = np.linspace(support[0], support[1], n_points)
    dt = np.full(n_points, t[1] - t[0])
    dt[[0, -1]] *= 0.5
    g = _log_integrand(log_density, t, 0)
    with np.errstate(under="ignore"):
        w = dt * np.exp(g)
    return QuadratureRule(np.exp(t), w)


def quadrature_moment(density, power: int, log: bool = False, rtol: float = 1e-12, max_points: int = 2**20) -> float:
    """``int x^power rho / int rho`` over ``(0, inf)`` for an unnormalized ``rho``.

    ``density`` returns ``rho(x)`` (or ``log rho(x)`` with ``log=True``).
    The node count doubles until two successive estimates agree to ``rtol``.

    Raises
    ------
    RuntimeError
        If the refinement does not settle before ``max_points`` nodes.
    """
    log_density = _as_log_density(density, log)
    support = _support(log_density, (0, power))
    prev = None
    n = 65
    while n <= max_points:
        t = np.linspace(support[0], support[1], n)
        g0 = _log_integrand(log_density, t, 0)
        shift = np.max(g0)
        with np.errstate(under="ignore", over="ignore"):
            w = np.exp(g0 - shift)
            w[[0, -1]] *= 0.5
            value = float(np.sum(w * np.exp(power * t)) / np.sum(w))
        if prev is not None and abs(value - prev) <= rtol * abs(value):
            return value
        prev = value
        n = 2 * n - 1
    raise RuntimeError(f"quadrature did not converge (last estimate {prev!r})")


def gamma_log_density(shape: float, rate: float):
    return lambda x: (shape - 1.0) * np.log(x) - rate * x


def inv_gauss_log_density(mean: float, shape: float):
    """Unnormalized log-density of the inverse Gaussian with mean ``mean`` and shape ``shape``."""
    return lambda x: -1.5 * np.log(x) - shape * (x - mean) ** 2 / (2.0 * mean * mean * x)


def _grid_weights(x):
    x = np.asarray(x, dtype=float)
    w = np.empty_like(x)
    w[1:-1] = 0.5 * (x[2:] - x[:-2])
    w[0] = 0.5 * (x[1] - x[0])
    w[-1] = 0.5 * (x[-1] - x[-2])
    return w


def grid_kl(target_log_density: Callable, family_logpdf: Callable, param_grid, x_grid):
    """Family member minimizing ``KL(q_theta || target)`` over ``param_grid``.

    ``x_grid`` is a 1D array of points, or a pair of 1D arrays spanning a
    tensor grid for 2D targets (then both callables get the two coordinate
    arrays).  The target may be unnormalized.  Each ``q_theta`` is
    renormalized on the grid so that truncation does not bias the scan.

    Returns
    -------
    best : the minimizing parameter
    kls : array of KL values, one per parameter
    """
    if isinstance(x_grid, tuple):
        xs, ys = (np.asarray(a, dtype=float) for a in x_grid)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        args = (X, Y)
        cell = np.outer(_grid_weights(xs), _grid_weights(ys))
    else:
        args = (np.asarray(x_grid, dtype=float),)
        cell = _grid_weights(args[0])
    log_p = np.asarray(target_log_density(*args), dtype=float)

    params = list(param_grid)
    kls = np.empty(len(params))
    for i, theta in enumerate(params):
        log_q = np.asarray(family_logpdf(*args, theta), dtype=float)
        q = np.exp(log_q) * cell
        mass = np.sum(q)
        q_n = q / mass
        ok = q_n > 0
        kls[i] = np.sum(q_n[ok] * (log_q[ok] - np.log(mass) - log_p[ok]))
    return params[int(np.argmin(kls))], kls


class MCEstimate(NamedTuple):
    mean: float
    stderr: float


def mc_expectation(sampler: Callable, fn: Callable, n: int = 100_000, seed=None) -> MCEstimate:
    """Monte-Carlo estimate of ``E[fn(X)]`` with ``sampler(rng, n)`` drawing ``X`` row-wise."""
    rng = np.random.default_rng(seed)
    vals = np.asarray(fn(sampler(rng, n)), dtype=float)
    return MCEstimate(float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n)))


# -- self-contained suite ----------------------------------------------------


class OracleCheck(NamedTuple):
    name: str
    passed: bool
    discrepancy: float
    tolerance: float


def random_dense_instance(rng, max_nodes=128, max_data=64, kmax=5.0):
    """Random small Helmholtz inversion and its interior-node dense equivalent.

    Returns ``(stack, d, prior, lam, (H, C0, u0_interior))``.
    """
    from .forward import HelmholtzProblem, assemble_forward_stack
    from .prior import Grid1D, TruncatedPrior, build_eigensystem

    n = int(rng.integers(12, max_nodes + 1))
    grid = Grid1D(n)
    n_pts = int(rng.integers(1, 5))
    points = tuple(sorted(rng.choice(n, size=n_pts, replace=False).tolist()))
    n_k = int(rng.integers(1, max(2, max_data // (2 * n_pts)) + 1))
    kappas = np.sort(rng.uniform(0.5, kmax, n_k))
    kappas = kappas[np.concatenate([[True], np.diff(kappas) > 1e-3])]
    stack = assemble_forward_stack(HelmholtzProblem(grid, tuple(kappas), points))
    eigsys = build_eigensystem(grid, p=int(rng.integers(1, 3)))
    u0 = 0.1 * rng.standard_normal(n)
    u0[[0, -1]] = 0.0
    prior = TruncatedPrior(eigsys, int(rng.integers(1, eigsys.n_modes + 1)), u0)
    lam = float(np.exp(rng.uniform(-2, 2)))
    d = stack.apply(rng.standard_normal(n)) + 0.01 * rng.standard_normal(stack.n_data)

    E = eigsys.eigvecs[1:-1]
    C0 = (E * prior.variances(lam)) @ E.T
    H = stack.matrix[:, 1:-1]
    return stack, d, prior, lam, (H, C0, u0[1:-1])


def _rel(a, b):
    scale = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def check_conjugacy(n_instances=5, seed=0):
    from .vb_gaussian import update_u
    from .vb_laplace import update_u_weighted

    rng = np.random.default_rng(seed)
    worst_mean = worst_cov = 0.0
    for _ in range(n_instances):
        stack, d, prior, lam, (H, C0, m0) = random_dense_instance(rng)
        tau = float(np.exp(rng.uniform(0, 6)))
        weights = np.exp(rng.uniform(0, 6, stack.n_data))
        for f, prec in ((update_u(stack, d, prior, lam, tau), tau),
                        (update_u_weighted(stack, d, prior, lam, weights), weights)):
            mean, cov = exact_gaussian_posterior(H, d, m0, C0, prec)
            worst_mean = max(worst_mean, _rel(f.mean[1:-1], mean))
            worst_cov = max(worst_cov, _rel(f.nodal_cov()[1:-1, 1:-1], cov))
    return [
        OracleCheck("conjugate mean vs dense posterior", bool(worst_mean <= 1e-8), worst_mean, 1e-8),
        OracleCheck("conjugate covariance vs dense posterior", bool(worst_cov <= 1e-6), worst_cov, 1e-6),
    ]


def check_moments(n_grid=5):
    from .vb_gaussian import GammaFactor
    from .vb_laplace import InvGaussFactor

    worst = 0.0
    for a in np.linspace(0.5, 20.0, n_grid):
        for b in np.geomspace(1e-3, 1e3, n_grid):
            g = GammaFactor(a, b)
            est = quadrature_moment(gamma_log_density(a, b), 1, log=True)
            worst = max(worst, abs(est - g.mean()) / g.mean())
    for m in np.geomspace(1e-2, 1e2, n_grid):
        for z in np.geomspace(1e-2, 1e2, n_grid):
            f = InvGaussFactor(np.array([m]), z)
            dens = inv_gauss_log_density(m, z)
            e1 = quadrature_moment(dens, 1, log=True)
            em1 = quadrature_moment(dens, -1, log=True)
            worst = max(worst, abs(e1 - m) / m, abs(em1 - f.mean_reciprocal()[0]) / f.mean_reciprocal()[0])
    return [OracleCheck("Gamma / inverse-Gaussian moments vs quadrature", bool(worst <= 1e-8), float(worst), 1e-8)]


def check_expectations(seed=0, n=200_000):
    from .vb_gaussian import expect_prior_quadratic, expect_residual, update_u

    rng = np.random.default_rng(seed)
    stack, d, prior, lam, _ = random_dense_instance(rng, max_nodes=40, max_data=16)
    f = update_u(stack, d, prior, lam, 50.0)
    K = prior.K

    def quad(u):
        c = (u - prior.u0) @ prior.eigsys.eigvecs * prior.grid.h
        return np.sum(c[:, :K] ** 2 / prior.alphas[:K], axis=1)

    worst = 0.0
    for name, closed, fn in (
        ("quad", expect_prior_quadratic(f, prior), quad),
        ("res", expect_residual(f, stack, d), lambda u: np.sum((u @ stack.matrix.T - d) ** 2, axis=1)),
    ):
        est = mc_expectation(f.sample, fn, n, seed=seed + 1)
        worst = max(worst, abs(est.mean - closed) / est.stderr)
    return [OracleCheck("closed-form expectations vs Monte Carlo (z-score)", bool(worst <= 5.0), float(worst), 5.0)]


def check_coordinate_optimality():
    """Gaussian coordinate update for a scalar model vs a KL scan."""
    a, b, mu, tau = 2.0, 3.0, 0.7, 4.0
    # target exp(E_lam log p(u, lam)) with lam ~ Gamma(a, b), u | lam ~ N(0, 1/lam), y = u + noise
    e_lam = a / b
    target = lambda x: -0.5 * e_lam * x * x - 0.5 * tau * (x - mu) ** 2
    prec = e_lam + tau
    m_exact, v_exact = tau * mu / prec, 1.0 / prec
    means = np.linspace(m_exact - 0.2, m_exact + 0.2, 41)
    sds = np.sqrt(v_exact) * np.linspace(0.8, 1.2, 41)
    grid = [(m, s) for m in means for s in sds]
    best, _ = grid_kl(target, lambda x, th: stats.norm.logpdf(x, th[0], th[1]), grid, np.linspace(-6, 6, 4001))
    err = max(abs(best[0] - m_exact) / (means[1] - means[0]), abs(best[1] - np.sqrt(v_exact)) / (sds[1] - sds[0]))
    return [OracleCheck("Gaussian coordinate update vs KL scan (grid cells)", bool(err <= 1.0), float(err), 1.0)]


def run_oracle_suite(seed: int = 0) -> list:
    """Run every cross-check once and return the results."""
    return (
        check_conjugacy(seed=seed)
        + check_moments()
        + check_expectations(seed=seed)
        + check_coordinate_optimality()
    )
