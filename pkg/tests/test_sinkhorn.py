import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import entropic_dual_by_ascent, entropic_dual_value, half_sq_cost
from stochbary.sinkhorn import (
    SinkhornDuals,
    dual_objective,
    half_cost,
    marginal_residual,
    sinkhorn_solve,
)


def cloud(rng, n, d=2, scale=1.0):
    return scale * rng.normal(size=(n, d))


class TestSolveExamples:
    @pytest.mark.parametrize("theta", [0.01, 1.0, 50.0])
    def test_single_coincident_points(self, theta):
        duals = sinkhorn_solve(np.zeros((1, 2)), np.zeros((1, 2)), theta)
        assert duals.f.tolist() == [0.0]
        assert duals.g.tolist() == [0.0]
        assert duals.residual == 0.0
        assert duals.converged

    def test_single_distinct_points(self):
        duals = sinkhorn_solve([[0.0, 0.0]], [[1.0, 0.0]], 1.0)
        assert duals.f[0] == 0.0
        assert duals.g[0] == pytest.approx(0.5, abs=1e-15)

    def test_four_points_match_independent_maximizer(self, rng):
        X, Y = cloud(rng, 4), cloud(rng, 4)
        duals = sinkhorn_solve(X, Y, 0.5, tol=1e-12)
        f_ref, g_ref, value = entropic_dual_by_ascent(X, Y, 0.5)
        np.testing.assert_allclose(duals.f, f_ref, atol=1e-6)
        np.testing.assert_allclose(duals.g, g_ref, atol=1e-6)
        assert entropic_dual_value(duals.f, duals.g, X, Y, 0.5) == pytest.approx(value, abs=1e-9)

    def test_first_source_potential_is_zero(self, rng):
        duals = sinkhorn_solve(cloud(rng, 30), cloud(rng, 20) + 2.0, 0.3)
        assert duals.f[0] == 0.0

    def test_unequal_sizes(self, rng):
        X, Y = cloud(rng, 17), cloud(rng, 40, scale=2.0)
        duals = sinkhorn_solve(X, Y, 0.4, tol=1e-10)
        assert duals.f.shape == (17,) and duals.g.shape == (40,)
        assert marginal_residual(duals, X, Y) <= 1e-10


class TestSolveErrors:
    @pytest.mark.parametrize("theta", [0.0, -1.0, math.inf, math.nan])
    def test_bad_theta(self, theta):
        with pytest.raises(ValueError):
            sinkhorn_solve(np.zeros((2, 2)), np.ones((2, 2)), theta)

    def test_non_finite_cost(self):
        with pytest.raises(ValueError, match="non-finite"):
            sinkhorn_solve([[np.inf, 0.0]], [[0.0, 0.0]], 1.0)

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            sinkhorn_solve(np.zeros((0, 2)), np.zeros((3, 2)), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            sinkhorn_solve(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)

    def test_non_positive_tol(self):
        with pytest.raises(ValueError):
            sinkhorn_solve(np.zeros((2, 2)), np.ones((2, 2)), 1.0, tol=0.0)

    def test_iteration_cap_is_reported(self, rng):
        X, Y = cloud(rng, 50), cloud(rng, 50) + 1.0
        duals = sinkhorn_solve(X, Y, 0.05, tol=1e-14, max_iter=3, newton=False)
        assert not duals.converged
        assert duals.iterations == 3
        assert duals.residual > 1e-14
        assert duals.residual == pytest.approx(marginal_residual(duals, X, Y), rel=1e-6)


class TestMarginalResidual:
    def test_converged_solve_meets_tolerance(self, rng):
        X, Y = cloud(rng, 40), cloud(rng, 35)
        duals = sinkhorn_solve(X, Y, 0.2, tol=1e-9)
        assert duals.converged
        assert marginal_residual(duals, X, Y) <= 1e-9

    def test_zero_duals_on_coincident_points(self):
        duals = SinkhornDuals(np.zeros(1), np.zeros(1), 1.0, 0, 0.0)
        assert marginal_residual(duals, [[0.0]], [[0.0]]) == 0.0

    def test_zero_duals_two_by_two_by_hand(self):
        # X = {0, 1}, Y = {0, 2} in 1-d, theta = 1, f = g = 0
        c = np.array([[0.0, 2.0], [0.5, 0.5]])
        rows = 0.5 * np.exp(-c).sum(axis=1)
        cols = 0.5 * np.exp(-c).sum(axis=0)
        expected = np.abs(np.concatenate([rows, cols]) - 1).max()
        duals = SinkhornDuals(np.zeros(2), np.zeros(2), 1.0, 0, 0.0)
        assert marginal_residual(duals, [[0.0], [1.0]], [[0.0], [2.0]]) == pytest.approx(expected, rel=1e-14)

    def test_shape_mismatch(self):
        duals = SinkhornDuals(np.zeros(2), np.zeros(3), 1.0, 0, 0.0)
        with pytest.raises(ValueError):
            marginal_residual(duals, np.zeros((3, 2)), np.zeros((3, 2)))

    @pytest.mark.parametrize("newton", [False, True])
    def test_reported_residual_matches_recomputation(self, rng, newton):
        X, Y = cloud(rng, 60), cloud(rng, 60, scale=1.5)
        duals = sinkhorn_solve(X, Y, 0.1, tol=1e-8, newton=newton)
        assert marginal_residual(duals, X, Y) <= 1e-8
        # Newton can land at the rounding floor, where both values are noise of order n * eps
        assert duals.residual == pytest.approx(marginal_residual(duals, X, Y), rel=1e-3, abs=1e-13)


class TestProperties:
    @given(seed=st.integers(0, 2**31), theta=st.floats(0.05, 5.0))
    def test_objective_non_decreasing_across_sweeps(self, seed, theta):
        rng = np.random.default_rng(seed)
        X, Y = cloud(rng, 25), cloud(rng, 30, scale=2.0)
        values = []
        sinkhorn_solve(
            X, Y, theta, tol=1e-12, max_iter=200, newton=False,
            callback=lambda s, f, g: values.append(dual_objective(f, g, X, Y, theta)),
        )
        values = np.array(values)
        slack = 1e-12 * np.maximum(np.abs(values[:-1]), 1.0)
        assert np.all(np.diff(values) >= -slack)

    @given(seed=st.integers(0, 2**31), shift=st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        X, Y = cloud(rng, 12), cloud(rng, 9)
        duals = sinkhorn_solve(X, Y, 0.7, tol=1e-10)
        moved = SinkhornDuals(duals.f + shift, duals.g - shift, duals.theta, 0, 0.0)
        assert dual_objective(moved.f, moved.g, X, Y, 0.7) == pytest.approx(
            dual_objective(duals.f, duals.g, X, Y, 0.7), abs=1e-9 * (1 + abs(shift))
        )
        assert marginal_residual(moved, X, Y) == pytest.approx(marginal_residual(duals, X, Y), abs=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_log_domain_stability_small_theta(self, seed):
        # |x| <= 10 and theta = 1e-3 puts cost / theta near 1e5; nothing may overflow
        rng = np.random.default_rng(seed)
        X = rng.uniform(-7, 7, size=(40, 2))
        Y = rng.uniform(-7, 7, size=(40, 2))
        values = []
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            duals = sinkhorn_solve(
                X, Y, 1e-3, tol=1e-8, max_iter=2000,
                callback=lambda s, f, g: values.append(dual_objective(f, g, X, Y, 1e-3)),
            )
        assert np.all(np.isfinite(duals.f)) and np.all(np.isfinite(duals.g))
        assert np.isfinite(duals.residual)
        assert duals.residual == pytest.approx(marginal_residual(duals, X, Y), rel=1e-6)
        assert np.all(np.diff(values) >= -1e-12 * np.maximum(np.abs(values[:-1]), 1.0))

    def test_small_theta_converges_on_compact_inputs(self, rng):
        X = rng.uniform(-0.5, 0.5, size=(30, 2))
        Y = rng.uniform(-0.5, 0.5, size=(30, 2))
        duals = sinkhorn_solve(X, Y, 1e-3, tol=1e-8)
        assert duals.converged
        assert marginal_residual(duals, X, Y) <= 1e-8

    def test_half_cost_matches_direct(self, rng):
        X, Y = cloud(rng, 7, 3), cloud(rng, 5, 3)
        np.testing.assert_allclose(half_cost(X, Y), half_sq_cost(X, Y), atol=1e-13)
        assert np.all(half_cost(X, X).diagonal() >= 0)

    def test_newton_finish_agrees_with_plain_sweeps(self, rng):
        X, Y = cloud(rng, 64), cloud(rng, 64) + 0.5
        slow = sinkhorn_solve(X, Y, 0.05, tol=1e-9, max_iter=200_000, newton=False)
        fast = sinkhorn_solve(X, Y, 0.05, tol=1e-9)
        assert slow.converged and fast.converged
        np.testing.assert_allclose(fast.g, slow.g, atol=1e-7)
        assert fast.iterations <= slow.iterations
