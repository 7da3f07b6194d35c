"""Tiny hand-checkable instances shared by several test modules."""

import numpy as np

from vbinverse.forward import ForwardStack, HelmholtzProblem, assemble_forward_stack
from vbinverse.prior import EigenSystem, Grid1D, TruncatedPrior, build_eigensystem


def scalar_model(alpha=1.0, H=1.0):
    """One unknown coefficient ``c`` with prior variance ``alpha`` observed as ``H c``.

    Returns ``(stack, prior)``; the coefficient of the single mode is the
    scalar unknown.
    """
    grid = Grid1D(3)
    root_h = np.sqrt(grid.h)
    E = np.array([[0.0], [1.0 / root_h], [0.0]])
    es = EigenSystem(grid, np.array([alpha]), E, 1)
    stack = ForwardStack(np.array([[0.0, H * root_h, 0.0]]), grid, (1.0,), (1,), np.zeros(1, dtype=int))
    return stack, TruncatedPrior(es, 1)


def random_small(rng, n_max=40, p=None):
    """Random small Helmholtz inversion: ``(stack, d, prior)``."""
    n = int(rng.integers(8, n_max + 1))
    grid = Grid1D(n)
    n_k = int(rng.integers(1, 5))
    kappas = tuple(np.cumsum(rng.uniform(0.3, 2.0, n_k)))
    pts = tuple(sorted(set(rng.integers(0, n, size=int(rng.integers(1, 4))).tolist())))
    stack = assemble_forward_stack(HelmholtzProblem(grid, kappas, pts))
    es = build_eigensystem(grid, p=int(rng.integers(1, 3)) if p is None else p)
    prior = TruncatedPrior(es, int(rng.integers(1, es.n_modes + 1)))
    truth = np.sin(np.pi * grid.nodes) * rng.uniform(0.5, 2.0)
    d = stack.apply(truth) + rng.uniform(1e-3, 1e-1) * rng.standard_normal(stack.n_data)
    return stack, d, prior


def nodal_prior_cov(prior, lam):
    E = prior.eigsys.eigvecs[1:-1]
    return (E * prior.variances(lam)) @ E.T
