import math

import numpy as np
import pytest

from gsfm.core import Rotation, exp_map
from gsfm.solver import (
    ALL_FIXED,
    CONVERGED,
    ROTATION,
    HuberLoss,
    Problem,
    SolverError,
    SolverOptions,
    TrivialLoss,
    check_jacobian,
    solve,
)


def linear_residual(x):
    return x - 3.0, [np.ones((len(x), 1, 1))]


def rosenbrock(xy):
    x, y = xy[:, 0], xy[:, 1]
    r = np.stack([1.0 - x, 10.0 * (y - x * x)], axis=1)
    J = np.zeros((len(xy), 2, 2))
    J[:, 0, 0] = -1.0
    J[:, 1, 0] = -20.0 * x
    J[:, 1, 1] = 10.0
    return r, [J]


class TestBasics:
    def test_linear_1d(self):
        p = Problem()
        p.add_parameter_block("x", [0.0])
        p.add_residual_block(linear_residual, ["x"], 1)
        report = solve(p)
        assert report.termination == CONVERGED
        assert abs(p.values("x")[0] - 3.0) < 1e-10

    def test_rosenbrock(self):
        p = Problem()
        p.add_parameter_block("xy", [-1.2, 1.0])
        p.add_residual_block(rosenbrock, ["xy"], 2)
        report = solve(p, SolverOptions(max_iters=200))
        assert np.allclose(p.values("xy"), [1.0, 1.0], atol=1e-8)
        assert report.final_cost < 1e-15

    def test_huber_cost_value(self):
        # rho evaluated per block: 0.5*0.25 + (1*10 - 0.5) = 9.625
        p = Problem()
        p.add_parameter_block("a", [0.0], fixed=True)
        consts = np.array([[0.5], [10.0]])

        def fn(vals):
            return consts[: len(vals)], [np.zeros((len(vals), 1, 1))]

        p.add_residual_block(fn, ["a"], 1, loss=HuberLoss(1.0))
        p.add_residual_block(fn, ["a"], 1, loss=HuberLoss(1.0))
        assert abs(p.total_cost() - 9.625) < 1e-12

    def test_all_fixed(self):
        p = Problem()
        p.add_parameter_block("x", [1.0], fixed=True)
        p.add_residual_block(linear_residual, ["x"], 1)
        report = solve(p)
        assert report.termination == ALL_FIXED
        assert report.iterations == 0
        assert p.values("x")[0] == 1.0

    def test_fixed_block_never_moves(self):
        p = Problem()
        p.add_parameter_block("x", [0.0])
        p.add_parameter_block("y", [5.0], fixed=True)

        def fn(x, y):
            n = len(x)
            return x + y - 3.0, [np.ones((n, 1, 1)), np.ones((n, 1, 1))]

        p.add_residual_block(fn, ["x", "y"], 1)
        solve(p)
        assert p.values("y")[0] == 5.0
        assert abs(p.values("x")[0] - (-2.0)) < 1e-10

    def test_lower_bound_projection(self):
        p = Problem()
        p.add_parameter_block("x", [1.0], lower_bound=[0.5])
        p.add_residual_block(linear_residual, ["x"], 1)  # wants x = 3

        def toward_zero(x):
            return x + 3.0, [np.ones((len(x), 1, 1))]  # wants x = -3

        p2 = Problem()
        p2.add_parameter_block("x", [1.0], lower_bound=[0.5])
        p2.add_residual_block(toward_zero, ["x"], 1)
        solve(p2)
        assert p2.values("x")[0] == 0.5  # projected onto the bound

    def test_nonfinite_residual_aborts(self):
        p = Problem()
        p.add_parameter_block("x", [1.0])

        def bad(x):
            r = np.full((len(x), 1), np.nan)
            return r, [np.ones((len(x), 1, 1))]

        p.add_residual_block(bad, ["x"], 1)
        with pytest.raises(SolverError):
            solve(p)


class TestCostSequence:
    def test_accepted_costs_strictly_decreasing(self):
        costs = []

        p = Problem()
        p.add_parameter_block("xy", [-1.2, 1.0])

        def tracking(xy):
            return rosenbrock(xy)

        p.add_residual_block(tracking, ["xy"], 2)
        # run manually, capturing cost after each outer iteration
        prev = p.total_cost()
        for _ in range(30):
            report = solve(p, SolverOptions(max_iters=1))
            cost = p.total_cost()
            assert cost <= prev + 1e-15
            if report.termination == CONVERGED and report.step_norm == 0.0:
                break
            prev = cost


class TestManifold:
    def test_rotation_block_stays_unit(self):
        p = Problem()
        target = Rotation.from_axis_angle([0, 0, 1], 0.7)
        p.add_parameter_block("q", Rotation.identity().q, manifold=ROTATION)

        def fn(q):
            n = len(q)
            res = np.empty((n, 3))
            J = np.empty((n, 3, 3))
            for k in range(n):
                r = Rotation.from_quat(q[k])
                delta = target.inverse() * r
                from gsfm.core import log_map

                res[k] = log_map(delta)
                J[k] = np.eye(3)  # first-order: d log(T^-1 R exp(w)) / dw ~ I
            return res, [J]

        p.add_residual_block(fn, ["q"], 3)
        solve(p, SolverOptions(max_iters=50))
        q = p.values("q")
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9
        assert np.allclose(q, target.q, atol=1e-6)


class TestCheckJacobian:
    def test_linear_exact(self):
        p = Problem()
        p.add_parameter_block("x", [1.0])
        p.add_residual_block(linear_residual, ["x"], 1)
        assert check_jacobian(p) < 1e-9

    def test_detects_wrong_jacobian(self):
        p = Problem()
        p.add_parameter_block("x", [1.0])

        def wrong(x):
            return x - 3.0, [2.0 * np.ones((len(x), 1, 1))]

        p.add_residual_block(wrong, ["x"], 1)
        assert check_jacobian(p) > 0.3


def _bilinear_problem(eliminate=False, dense=False):
    rng = np.random.default_rng(7)
    v = rng.standard_normal((6, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)

    p = Problem()
    p.add_parameter_block("c", [0.1, -0.2, 0.3])
    p.add_parameter_block("x0", [1.0, 2.0, 1.5])
    p.add_parameter_block("x1", [-1.0, 0.5, 2.0])
    for k in range(6):
        p.add_parameter_block(f"d{k}", [1.0], lower_bound=[1e-12])

    def fn(c, x, d):
        n = len(c)
        diff = x - c
        r = v[:n] - d * diff
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        Jc = eye * d[:, :, None]
        return r, [Jc, -Jc, -diff[:, :, None]]

    for k in range(6):
        p.add_residual_block(fn, ["c", f"x{k % 2}", f"d{k}"], 3)
    return p


class TestLinearSolvePaths:
    def test_sparse_matches_dense_per_iteration(self):
        # identical data, one LM iteration at a time; parameter trajectories
        # must agree to 1e-10 at every step
        p_sparse = _bilinear_problem()
        p_dense = _bilinear_problem()
        for _ in range(8):
            solve(p_sparse, SolverOptions(max_iters=1))
            solve(p_dense, SolverOptions(max_iters=1, dense=True))
            for name in p_sparse.parameter_names:
                assert np.allclose(
                    p_sparse.values(name), p_dense.values(name), atol=1e-10
                )

    def test_schur_matches_plain_per_iteration(self):
        p_plain = _bilinear_problem()
        p_schur = _bilinear_problem()
        elim = tuple(f"d{k}" for k in range(6))
        for _ in range(8):
            solve(p_plain, SolverOptions(max_iters=1))
            solve(p_schur, SolverOptions(max_iters=1, eliminate=elim))
            for name in p_plain.parameter_names:
                assert np.allclose(
                    p_plain.values(name), p_schur.values(name), atol=1e-9
                )

    def test_schur_rejects_coupled_elimination(self):
        p = _bilinear_problem()
        with pytest.raises(SolverError):
            solve(p, SolverOptions(eliminate=("c", "x0")))
