import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hpcalign.core import DimensionError, Rng, finite_diff_grad, max_rel_error
from hpcalign.ot import (DiscreteMeasure, cost_matrix, ot_eps, sinkhorn, sinkhorn_divergence,
                         sinkhorn_divergence_full, sinkhorn_grad_points)

U = DiscreteMeasure.uniform


def exact_assignment_cost(X, Y):
    """Brute force over permutations; uniform weights, n == m."""
    C = cost_matrix(X, Y)
    n = len(X)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


# --- measures and costs ---------------------------------------------------------


def test_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 1)), np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 1)), np.array([1.5, -0.5]))
    with pytest.raises(DimensionError):
        DiscreteMeasure(np.zeros((3, 1)), np.array([0.5, 0.5]))


def test_cost_matrix_examples():
    assert np.array_equal(cost_matrix([[0.0, 0.0]], [[0.0, 0.0]]), [[0.0]])
    assert np.array_equal(cost_matrix([[0.0]], [[1.0], [3.0]]), [[1.0, 9.0]])
    X, Y = Rng(0).normal((3, 5)), Rng(1).normal((4, 5))
    expanded = (X**2).sum(1)[:, None] - 2 * X @ Y.T + (Y**2).sum(1)[None, :]
    assert np.allclose(cost_matrix(X, Y), expanded)
    with pytest.raises(DimensionError):
        cost_matrix(X, Rng(2).normal((2, 4)))


# --- solver ------------------------------------------------------------------------


def test_single_atoms():
    tp = sinkhorn(U([[0.0]]), U([[0.0]]))
    assert np.allclose(tp.plan, [[1.0]]) and tp.converged
    assert ot_eps(U([[0.0]]), U([[0.0]])) == pytest.approx(0.0, abs=1e-12)
    assert ot_eps(U([[0.0]]), U([[1.0]])) == pytest.approx(1.0, abs=1e-12)
    x, y = np.array([[0.3, -1.0]]), np.array([[2.0, 0.5]])
    assert ot_eps(U(x), U(y)) == pytest.approx(float(cost_matrix(x, y)[0, 0]), abs=1e-12)


def test_sorted_1d_plan_is_monotone():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    tp = sinkhorn(U(x), U(x + 0.1), eps=1e-3)
    assert tp.converged
    assert np.all(np.diag(tp.plan) * 4 >= 0.95)


def test_two_point_identity_matching():
    x = np.array([[0.0], [1.0]])
    assert ot_eps(U(x), U(x), eps=1e-3) == pytest.approx(0.0, abs=5e-3)


@pytest.mark.parametrize("seed", range(10))
def test_plan_marginals_and_positivity(seed):
    r = Rng(seed)
    a = DiscreteMeasure(r.normal((5, 3)), r.split(1).generator().dirichlet(np.ones(5)))
    b = DiscreteMeasure(r.split(2).normal((7, 3)), r.split(3).generator().dirichlet(np.ones(7)))
    tp = sinkhorn(a, b)
    assert tp.converged and tp.marginal_err <= 1e-9
    assert np.all(tp.plan >= 0)
    assert np.allclose(tp.plan.sum(1), a.weights, atol=1e-9)
    assert np.allclose(tp.plan.sum(0), b.weights, atol=1e-9)


def test_non_convergence_is_reported():
    a, b = U(Rng(0).normal((6, 2)) * 3), U(Rng(1).normal((6, 2)) * 3)
    tp = sinkhorn(a, b, eps=1e-3, max_iter=2, tol=1e-14)
    assert not tp.converged
    assert not sinkhorn_divergence_full(a, b, eps=1e-3, max_iter=2, tol=1e-14).converged


def test_invalid_eps():
    with pytest.raises(ValueError):
        sinkhorn(U([[0.0]]), U([[1.0]]), eps=0.0)


# --- divergence -------------------------------------------------------------------


def test_divergence_examples():
    a = U(Rng(3).normal((6, 2)))
    assert abs(sinkhorn_divergence(a, a)) < 1e-8
    assert sinkhorn_divergence(U([[0.0]]), U([[1.0]])) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_eps_bias_shrinks_toward_exact_cost(seed):
    X = Rng(seed).normal((8, 2))
    Y = Rng(seed + 50).normal((8, 2)) + 0.5
    exact = exact_assignment_cost(X, Y)
    gaps = [abs(sinkhorn_divergence(U(X), U(Y), eps) - exact) for eps in (0.1, 0.05, 0.01)]
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] / exact < 0.05


points = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=2),
                       min_size=n, max_size=n)).map(np.array)


@given(points, points)
def test_divergence_nonnegative_and_symmetric(X, Y):
    d = sinkhorn_divergence_full(U(X), U(Y))
    if not d.converged:
        return
    assert d.value >= -1e-8
    assert abs(d.value - sinkhorn_divergence(U(Y), U(X))) < 1e-8


# --- gradients ------------------------------------------------------------------------


def test_gradient_examples():
    a = U(Rng(4).normal((5, 2)))
    assert np.abs(sinkhorn_grad_points(a, a)).max() < 1e-6
    x, y = np.array([[0.5, -1.0]]), np.array([[2.0, 1.0]])
    assert np.allclose(sinkhorn_grad_points(U(x), U(y)), 2 * (x - y))


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    r = Rng(seed)
    X, Y = r.normal((5, 2)), r.split(1).normal((4, 2)) + 0.3
    b = U(Y)
    g = sinkhorn_grad_points(U(X), b, eps=0.1, tol=1e-13, max_iter=2000)
    num = finite_diff_grad(lambda v: sinkhorn_divergence(U(v), b, eps=0.1, tol=1e-13, max_iter=2000), X)
    assert max_rel_error(g, num) < 1e-3
