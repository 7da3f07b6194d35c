import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from helpers import nodal_prior_cov, random_small, scalar_model
from vbinverse.errors import IndefinitePrecisionError, NonConvergenceError
from vbinverse.forward import HelmholtzProblem, assemble_forward_stack, empty_stack, two_bumps
from vbinverse.oracle import exact_gaussian_posterior, gamma_log_density, mc_expectation, quadrature_moment
from vbinverse.prior import Grid1D, TruncatedPrior, build_eigensystem
from vbinverse.vb_gaussian import (
    GammaFactor,
    GaussianFactor,
    GaussianHyper,
    cg_solve,
    elbo,
    elbo_gaussian,
    expect_prior_quadratic,
    expect_residual,
    normal_equation_operators,
    projected_operator,
    relative_change,
    run_vb_gaussian,
    update_lambda,
    update_tau,
    update_u,
    weighted_gaussian_update,
)


# -- factors -----------------------------------------------------------------


def test_gamma_factor_moments_and_validation():
    g = GammaFactor(3.0, 2.0)
    assert g.mean() == 1.5
    assert g.mean_log() == pytest.approx(stats.gamma(3.0, scale=0.5).expect(np.log), rel=1e-8)
    assert g.entropy() == pytest.approx(stats.gamma(3.0, scale=0.5).entropy(), rel=1e-12)
    with pytest.raises(ValueError):
        GammaFactor(0.0, 1.0)


def test_gaussian_factor_cov_roundtrip(small_problem):
    _, _, prior, _ = small_problem
    es = prior.eigsys
    rng = np.random.default_rng(0)
    A = rng.standard_normal((es.n_modes, es.n_modes))
    C = A @ A.T + np.eye(es.n_modes)
    f = GaussianFactor.from_coeff_cov(es, np.zeros(81), C)
    np.testing.assert_allclose(f.coeff_cov(), C, rtol=1e-10, atol=1e-10)
    g = GaussianFactor.from_nodal_cov(es, np.zeros(81), f.nodal_cov())
    np.testing.assert_allclose(g.coeff_cov(), C, rtol=1e-8, atol=1e-8)
    assert f.log_det() == pytest.approx(np.linalg.slogdet(C)[1], rel=1e-10)
    np.testing.assert_allclose(f.pointwise_var(), np.diag(f.nodal_cov()), rtol=1e-12)


# -- u update ------------------------------------------------------------------


def test_update_u_without_data_returns_prior(small_problem):
    _, _, prior, _ = small_problem
    u0 = np.sin(np.pi * prior.grid.nodes)
    pr = prior.with_mean(u0)
    f = update_u(empty_stack(prior.grid), np.zeros(0), pr, 2.0, 5.0)
    np.testing.assert_allclose(f.mean, u0, atol=1e-15)
    np.testing.assert_allclose(f.coeff_cov(), np.diag(pr.variances(2.0)), rtol=1e-12, atol=1e-30)


def test_update_u_scalar_toy():
    stack, prior = scalar_model()
    f = update_u(stack, np.array([2.0]), prior, 1.0, 1.0)
    assert prior.eigsys.coefficients(f.mean)[0] == pytest.approx(1.0, rel=1e-14)
    assert f.coeff_cov()[0, 0] == pytest.approx(0.5, rel=1e-14)
    # brute-force grid posterior over the scalar unknown
    c = np.linspace(-8, 8, 200001)
    logp = -0.5 * c ** 2 - 0.5 * (2.0 - c) ** 2
    w = np.exp(logp - logp.max())
    mean = np.sum(c * w) / np.sum(w)
    assert mean == pytest.approx(1.0, abs=1e-8)
    assert np.sum((c - mean) ** 2 * w) / np.sum(w) == pytest.approx(0.5, rel=1e-8)


def test_update_u_large_tau_matches_dense_solve():
    grid = Grid1D(5)  # three interior nodes
    stack = assemble_forward_stack(HelmholtzProblem(grid, (1.0, 2.0), (0, 4)))
    prior = TruncatedPrior(build_eigensystem(grid), 3)
    truth = np.array([0.0, 1.0, -0.5, 2.0, 0.0])
    d = stack.apply(truth)
    f = update_u(stack, d, prior, 1.0, 1e12)
    H = stack.matrix[:, 1:-1]
    mean, _ = exact_gaussian_posterior(H, d, np.zeros(3), nodal_prior_cov(prior, 1.0), 1e12)
    np.testing.assert_allclose(f.mean[1:-1], mean, rtol=1e-8)
    # H has full column rank here, so the data pin the unknowns
    np.testing.assert_allclose(f.mean[1:-1], truth[1:-1], rtol=1e-4)


@given(seed=st.integers(0, 2**31))
def test_update_u_conjugacy(seed):
    rng = np.random.default_rng(seed)
    stack, d, prior = random_small(rng)
    prior = prior.with_mean(0.1 * rng.standard_normal(prior.grid.n_nodes) * np.sin(np.pi * prior.grid.nodes))
    lam, tau = float(np.exp(rng.uniform(-2, 2))), float(np.exp(rng.uniform(0, 8)))
    f = update_u(stack, d, prior, lam, tau)
    mean, cov = exact_gaussian_posterior(stack.matrix[:, 1:-1], d, prior.u0[1:-1], nodal_prior_cov(prior, lam), tau)
    np.testing.assert_allclose(f.mean[1:-1], mean, rtol=1e-8, atol=1e-12 * np.max(np.abs(mean)))
    assert np.linalg.norm(f.nodal_cov()[1:-1, 1:-1] - cov) <= 1e-6 * np.linalg.norm(cov)


@given(seed=st.integers(0, 2**31))
def test_posterior_contracts_prior(seed):
    rng = np.random.default_rng(seed)
    stack, d, prior = random_small(rng, n_max=24)
    lam, tau = 1.5, 1e3
    f = update_u(stack, d, prior, lam, tau)
    C0 = nodal_prior_cov(prior, lam)
    C = f.nodal_cov()[1:-1, 1:-1]
    # data only remove uncertainty: C0 - C is positive semi-definite
    assert np.min(np.linalg.eigvalsh(C0 - C)) >= -1e-10 * np.max(np.linalg.eigvalsh(C0))


def test_cg_mean_matches_dense(small_problem):
    _, stack, prior, truth = small_problem
    d = stack.apply(truth)
    a = update_u(stack, d, prior, 1.0, 1e6)
    b = update_u(stack, d, prior, 1.0, 1e6, method="cg")
    np.testing.assert_allclose(b.mean, a.mean, rtol=1e-8, atol=1e-10 * np.max(np.abs(a.mean)))
    with pytest.raises(ValueError):
        update_u(stack, d, prior, 1.0, 1e6, method="lu")


def test_update_u_argument_checks(small_problem):
    _, stack, prior, _ = small_problem
    d = np.zeros(stack.n_data)
    with pytest.raises(ValueError):
        update_u(stack, d, prior, 0.0, 1.0)
    with pytest.raises(ValueError):
        update_u(stack, d, prior, 1.0, -1.0)


def test_indefinite_precision_reports_eigenvalue(small_problem):
    _, stack, prior, _ = small_problem
    G = projected_operator(stack, prior.eigsys)
    with pytest.raises(IndefinitePrecisionError) as info:
        weighted_gaussian_update(G, stack, np.zeros(stack.n_data), prior, 1.0, np.full(stack.n_data, -1e12))
    assert info.value.min_eigenvalue < 0


# -- conjugate gradients -----------------------------------------------------------


def test_cg_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    res = cg_solve(lambda x: x, b)
    np.testing.assert_allclose(res.x, b)
    assert res.iterations == 1


def test_cg_random_spd(rng):
    A = rng.standard_normal((10, 10))
    A = A @ A.T + 10 * np.eye(10)
    b = rng.standard_normal(10)
    res = cg_solve(lambda x: A @ x, b, tol=1e-12)
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), rtol=1e-8)


def test_cg_non_convergence_carries_residual(rng):
    A = np.diag(np.geomspace(1, 1e8, 50))
    with pytest.raises(NonConvergenceError) as info:
        cg_solve(lambda x: A @ x, np.ones(50), tol=1e-14, max_iter=3)
    assert info.value.iterations == 3 and info.value.residual > 0


def test_cg_detects_indefinite():
    A = np.diag([1.0, -1.0])
    with pytest.raises(IndefinitePrecisionError):
        cg_solve(lambda x: A @ x, np.array([1.0, 1.0]))


def _iterations(matvec, rhs, precond=None, max_iter=20000):
    try:
        return cg_solve(matvec, rhs, tol=1e-8, max_iter=max_iter, precond=precond).iterations
    except NonConvergenceError:
        return max_iter


@pytest.mark.slow
def test_prior_preconditioning_cuts_iterations():
    fine, coarse = Grid1D(1000), Grid1D(600)
    kappas = tuple(0.5 * np.arange(1, 101))
    pf = HelmholtzProblem(fine, kappas)
    d = assemble_forward_stack(pf).apply(two_bumps(fine.nodes))
    d = d + 1e-3 * np.random.default_rng(0).standard_normal(d.size)
    stack = assemble_forward_stack(pf.on_grid(coarse))
    prior = TruncatedPrior.from_threshold(build_eigensystem(coarse), 1e-3)
    matvec, rhs, precond = normal_equation_operators(stack, d, prior, 10.0, 1e6)
    with_pc = _iterations(matvec, rhs, precond)
    without = _iterations(matvec, rhs)
    assert with_pc < without


# -- expectations ------------------------------------------------------------------


def test_expect_prior_quadratic_identities(small_problem):
    _, _, prior, _ = small_problem
    es = prior.eigsys
    zero = GaussianFactor(prior.u0, np.zeros((es.n_modes, es.n_modes)), es)
    assert expect_prior_quadratic(zero, prior) == 0.0
    f = GaussianFactor.from_coeff_cov(es, prior.u0, np.diag(prior.variances(1.0)))
    assert expect_prior_quadratic(f, prior) == pytest.approx(prior.K, rel=1e-12)


def test_expect_residual_identities():
    stack, prior = scalar_model()
    es = prior.eigsys
    f = GaussianFactor(es.synthesize([0.5]), np.zeros((1, 1)), es)
    assert expect_residual(f, stack, [2.0]) == pytest.approx(1.5 ** 2)
    f = GaussianFactor(es.synthesize([2.0]), np.eye(1), es)
    assert expect_residual(f, stack, [2.0]) == pytest.approx(1.0)


def test_expect_residual_two_node_trace():
    # H = identity on two unknowns, C = I, u* = d  ->  E||Hu - d||^2 = tr(I) = 2
    from vbinverse.forward import ForwardStack
    from vbinverse.prior import EigenSystem

    grid = Grid1D(4)
    E = np.zeros((4, 2))
    E[1, 0] = E[2, 1] = 1.0 / np.sqrt(grid.h)
    es = EigenSystem(grid, np.array([1.0, 0.5]), E, 1)
    M = np.zeros((2, 4))
    M[0, 1] = M[1, 2] = np.sqrt(grid.h)  # maps each coefficient to one datum
    stack = ForwardStack(M, grid, (1.0,), (0,), np.zeros(2, dtype=int))
    d = np.array([0.3, -1.2])
    f = GaussianFactor(es.synthesize(d), np.eye(2), es)
    assert expect_residual(f, stack, d) == pytest.approx(2.0, rel=1e-12)


def test_expectations_match_monte_carlo(small_problem):
    _, stack, prior, truth = small_problem
    d = stack.apply(truth) + 1e-2 * np.random.default_rng(1).standard_normal(stack.n_data)
    f = update_u(stack, d, prior, 2.0, 1e3)
    K = prior.K

    def quad(u):
        c = prior.eigsys.coefficients(u - prior.u0)
        return np.sum(c[:, :K] ** 2 / prior.alphas[:K], axis=1)

    def res(u):
        return np.sum((u @ stack.matrix.T - d) ** 2, axis=1)

    for fn, closed in ((quad, expect_prior_quadratic(f, prior)), (res, expect_residual(f, stack, d))):
        est = mc_expectation(f.sample, fn, 100_000, seed=5)
        assert est.mean == pytest.approx(closed, rel=0.02)


# -- hyperparameter updates --------------------------------------------------------


def test_update_lambda_examples(small_problem):
    _, _, prior, _ = small_problem
    g = update_lambda(prior, 1.0, 0.1, 0.0)
    assert (g.shape, g.rate) == (1.0 + prior.K / 2, 0.1)
    prior34 = TruncatedPrior(build_eigensystem(Grid1D(100)), 34)
    g = update_lambda(prior34, 1.0, 0.1, 34.0)
    assert g.mean() == pytest.approx(18.0 / 17.1, rel=1e-14)
    assert quadrature_moment(gamma_log_density(g.shape, g.rate), 1, log=True) == pytest.approx(g.mean(), rel=1e-8)


def test_update_tau_examples():
    g = update_tau(400, 1.0, 1e-5, 0.0)
    assert (g.shape, g.rate) == (201.0, 1e-5)
    sigma = 1e-3
    for n in (1_000, 100_000):
        g = update_tau(n, 1.0, 1e-5, n * sigma ** 2)
        sigma_hat = np.sqrt(1.0 / g.mean())
        assert abs(sigma_hat - sigma) / sigma < 5.0 / n + 1e-5 / (n * sigma ** 2)


# -- ELBO and the driver -----------------------------------------------------------


def test_elbo_is_pure(small_problem):
    _, stack, prior, truth = small_problem
    d = stack.apply(truth)
    s = run_vb_gaussian(stack, d, prior, max_sweeps=3)
    hyper = GaussianHyper()
    assert elbo(s, stack, d, prior, hyper) == elbo(s, stack, d, prior, hyper)


def test_elbo_gap_equals_kl_by_quadrature():
    stack, prior = scalar_model()
    es = prior.eigsys
    hyper = GaussianHyper()
    lam_f, tau_f = GammaFactor(2.0, 1.0), GammaFactor(3.0, 2.0)
    d = np.array([2.0])
    best = update_u(stack, d, prior, lam_f.mean(), tau_f.mean())
    m, v = es.coefficients(best.mean)[0], best.coeff_cov()[0, 0]
    pert = GaussianFactor.from_coeff_cov(es, es.synthesize([m + 0.3]), np.array([[0.7 * v]]))
    gap = elbo_gaussian(best, lam_f, tau_f, stack, d, prior, hyper) - elbo_gaussian(
        pert, lam_f, tau_f, stack, d, prior, hyper
    )
    # KL(pert || best) by quadrature
    c = np.linspace(m - 12, m + 12, 400001)
    lq = stats.norm.logpdf(c, m + 0.3, np.sqrt(0.7 * v))
    lp = stats.norm.logpdf(c, m, np.sqrt(v))
    kl = np.trapezoid(np.exp(lq) * (lq - lp), c)
    assert gap == pytest.approx(kl, rel=1e-6)


def test_data_free_run_converges_quickly():
    grid = Grid1D(30)
    prior = TruncatedPrior(build_eigensystem(grid), 5)
    s = run_vb_gaussian(empty_stack(grid), np.zeros(0), prior, tol=1e-4)
    assert s.converged and s.iteration <= 2
    np.testing.assert_allclose(s.mean, 0.0, atol=1e-15)


def test_fixed_hyperparameters_give_exact_posterior(small_problem):
    _, stack, prior, truth = small_problem
    d = stack.apply(truth) + 1e-3 * np.random.default_rng(2).standard_normal(stack.n_data)
    s = run_vb_gaussian(stack, d, prior, fixed_lambda=3.0, fixed_tau=1e5, tol=0.0, max_sweeps=4)
    mean, cov = exact_gaussian_posterior(stack.matrix[:, 1:-1], d, np.zeros(79), nodal_prior_cov(prior, 3.0), 1e5)
    np.testing.assert_allclose(s.mean_trace[0][1:-1], mean, rtol=1e-8, atol=1e-12)
    assert np.linalg.norm(s.u_factor.nodal_cov()[1:-1, 1:-1] - cov) <= 1e-6 * np.linalg.norm(cov)
    for c in s.change_trace[1:]:
        assert c[0] < 1e-12
    assert np.all(np.isnan(s.elbo_trace))


def test_shapes_constant_and_flagged_non_convergence(small_problem):
    _, stack, prior, truth = small_problem
    d = stack.apply(truth) + 1e-3 * np.random.default_rng(3).standard_normal(stack.n_data)
    hyper = GaussianHyper()
    s = run_vb_gaussian(stack, d, prior, hyper, tol=1e-14, max_sweeps=4)
    assert not s.converged and s.iteration == 4
    assert s.lambda_factor.shape == hyper.alpha0 + prior.K / 2
    assert s.tau_factor.shape == hyper.alpha1 + stack.n_data / 2
    assert len(s.elbo_trace) == len(s.lambda_trace) == 4
    assert s.rel_changes[0] == np.inf or s.iteration > 1


@given(seed=st.integers(0, 2**31))
def test_elbo_monotone_random(seed):
    rng = np.random.default_rng(seed)
    stack, d, prior = random_small(rng)
    s = run_vb_gaussian(stack, d, prior, tol=1e-8, max_sweeps=40)
    e = np.array(s.elbo_trace)
    assert np.all(np.diff(e) >= -1e-8 * np.abs(e[1:]))


def test_relative_change_edge_cases():
    assert relative_change([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_change([0.0], [1.0]) == np.inf
    assert relative_change(2.0, 1.0) == 0.5


def test_run_rejects_bad_data(small_problem):
    _, stack, prior, _ = small_problem
    with pytest.raises(ValueError):
        run_vb_gaussian(stack, np.zeros(3), prior)
    with pytest.raises(ValueError):
        run_vb_gaussian(stack, np.zeros(stack.n_data), prior, max_sweeps=0)
