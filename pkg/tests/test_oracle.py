import numpy as np
import pytest
from scipy import stats

from vbinverse.oracle import (
    build_rule,
    exact_gaussian_posterior,
    gamma_log_density,
    grid_kl,
    inv_gauss_log_density,
    mc_expectation,
    quadrature_moment,
    run_oracle_suite,
)
from vbinverse.prior import Grid1D, TruncatedPrior, build_eigensystem
from vbinverse.vb_gaussian import update_lambda


def test_no_data_returns_prior():
    m0 = np.array([1.0, -2.0])
    C0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    mean, cov = exact_gaussian_posterior(np.zeros((0, 2)), np.zeros(0), m0, C0, 1.0)
    np.testing.assert_allclose(mean, m0)
    np.testing.assert_allclose(cov, C0, rtol=1e-14)


def test_scalar_hand_formula():
    mean, cov = exact_gaussian_posterior([[2.0]], [3.0], [0.5], [[4.0]], 0.25)
    prec = 0.25 * 4.0 + 0.25
    assert cov[0, 0] == pytest.approx(1.0 / prec)
    assert mean[0] == pytest.approx((0.25 * 2.0 * 3.0 + 0.5 / 4.0) / prec)


def test_diagonal_noise_precision_matches_scalar():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((4, 3))
    d = rng.standard_normal(4)
    a = exact_gaussian_posterior(H, d, np.zeros(3), np.eye(3), 2.0)
    b = exact_gaussian_posterior(H, d, np.zeros(3), np.eye(3), np.full(4, 2.0))
    np.testing.assert_allclose(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1])


def test_singular_prior_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        exact_gaussian_posterior(np.eye(2), np.ones(2), np.zeros(2), np.zeros((2, 2)), 1.0)


def test_quadrature_rule_integrates_normalized_density():
    rule = build_rule(lambda x: stats.gamma.pdf(x, 2.0, scale=1 / 3.0), 4001, (-40.0, 5.0))
    assert np.all(rule.weights >= 0)
    assert rule.integrate() == pytest.approx(1.0, abs=1e-10)
    assert rule.n_points == 4001


def test_gamma_and_ig_moments():
    assert quadrature_moment(gamma_log_density(2.0, 3.0), 1, log=True) == pytest.approx(2.0 / 3.0, rel=1e-8)
    assert quadrature_moment(inv_gauss_log_density(1.7, 0.9), 1, log=True) == pytest.approx(1.7, rel=1e-8)
    assert quadrature_moment(inv_gauss_log_density(1.7, 0.9), -1, log=True) == pytest.approx(
        1 / 1.7 + 1 / 0.9, rel=1e-8
    )
    # plain (non-log) densities work too
    assert quadrature_moment(lambda x: x * np.exp(-3.0 * x), 1) == pytest.approx(2.0 / 3.0, rel=1e-8)


def test_quadrature_non_convergence():
    with pytest.raises(RuntimeError):
        quadrature_moment(gamma_log_density(2.0, 3.0), 1, log=True, max_points=100)


def test_grid_kl_gaussian_brackets_analytic():
    mu, sd = 0.3, 0.8
    target = lambda x: stats.norm.logpdf(x, mu, sd)
    means = np.linspace(-1, 1, 41)
    sds = np.linspace(0.5, 1.2, 36)
    best, kls = grid_kl(target, lambda x, th: stats.norm.logpdf(x, *th),
                        [(m, s) for m in means for s in sds], np.linspace(-8, 8, 8001))
    assert abs(best[0] - mu) <= means[1] - means[0]
    assert abs(best[1] - sd) <= sds[1] - sds[0]
    assert kls.min() >= -1e-10


def test_grid_kl_symmetric_target():
    target = lambda x: np.logaddexp(-0.5 * (x - 1.5) ** 2, -0.5 * (x + 1.5) ** 2)
    means = np.linspace(-1, 1, 21)
    best, _ = grid_kl(target, lambda x, m: stats.norm.logpdf(x, m, 2.0), list(means), np.linspace(-12, 12, 6001))
    assert best == pytest.approx(0.0, abs=1e-12)


def test_grid_kl_gamma_conjugate_update():
    prior = TruncatedPrior(build_eigensystem(Grid1D(30)), 6)
    e_quad = 4.2
    g = update_lambda(prior, 1.0, 0.1, e_quad)
    # exp(E log p(lam, u)) as a function of lam
    target = lambda x: (1.0 - 1.0 + prior.K / 2.0) * np.log(x) - (0.1 + 0.5 * e_quad) * x
    shapes = np.linspace(g.shape - 1, g.shape + 1, 21)
    rates = np.linspace(g.rate - 0.5, g.rate + 0.5, 21)
    best, _ = grid_kl(target, lambda x, th: stats.gamma.logpdf(x, th[0], scale=1 / th[1]),
                      [(a, b) for a in shapes for b in rates], np.linspace(1e-6, 12, 24001))
    assert abs(best[0] - g.shape) <= shapes[1] - shapes[0]
    assert abs(best[1] - g.rate) <= rates[1] - rates[0]


def test_grid_kl_two_dimensional():
    target = lambda x, y: -0.5 * (x ** 2 + (y - 1.0) ** 2)
    fam = lambda x, y, m: stats.norm.logpdf(x, m[0]) + stats.norm.logpdf(y, m[1])
    grid = [(a, b) for a in np.linspace(-1, 1, 5) for b in np.linspace(0, 2, 5)]
    best, _ = grid_kl(target, fam, grid, (np.linspace(-7, 7, 301), np.linspace(-6, 8, 301)))
    assert best == pytest.approx((0.0, 1.0))


def test_mc_expectation():
    est = mc_expectation(lambda rng, n: rng.standard_normal(n), lambda x: x ** 2, 200_000, seed=0)
    assert abs(est.mean - 1.0) < 5 * est.stderr


def test_suite_passes():
    checks = run_oracle_suite()
    assert checks and all(c.passed for c in checks), checks
