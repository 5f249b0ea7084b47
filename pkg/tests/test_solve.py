"""Tests for the solve module: line search, L-BFGS ascent and estimators."""

import unittest

import numpy as np

from sdemap.errors import DomainError, InputError
from sdemap.grid import sup_norm_distance
from sdemap.model import make_duffing, make_linear_gaussian
from sdemap.objective import DecisionVector, evaluate
from sdemap.sim import SimConfig, generate_dataset, simulate
from sdemap.solve import (EstimationProblem, SolverConfig, estimate, gcv_smooth, initial_guess,
                          lbfgs_ascent, maximize, strong_wolfe)
from sdemap.utils import make_generator


def _quadratic(dim, seed):
    rng = make_generator(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    A = Q @ np.diag(np.linspace(1.0, 2.0, dim)) @ Q.T
    c = rng.standard_normal(dim)

    def fun(u):
        r = u - c
        return -0.5 * r @ A @ r, -A @ r, None

    return fun, c


def _measurement_partition(spec):
    return EstimationProblem(spec, np.zeros(spec.measurement.sample_times.size)).partition(0)


class TestSolverConfig(unittest.TestCase):
    """Test cases for solver settings."""

    def test_defaults(self):
        """Test the default iteration cap and memory."""
        cfg = SolverConfig()
        self.assertEqual(cfg.max_iters, 500)
        self.assertEqual(cfg.memory, 20)
        self.assertIsNone(cfg.grad_tol)

    def test_invalid(self):
        """Test rejection of inconsistent Wolfe constants and limits."""
        with self.assertRaises(DomainError):
            SolverConfig(c1=0.5, c2=0.4)
        with self.assertRaises(DomainError):
            SolverConfig(memory=0)
        with self.assertRaises(DomainError):
            SolverConfig(grad_tol=0.0)


class TestLineSearch(unittest.TestCase):
    """Test cases for the strong Wolfe line search."""

    def test_parabola(self):
        """Test an accepted step satisfying both Wolfe conditions on (t - 2)^2."""
        phi = lambda t: ((t - 2.0) ** 2, 2.0 * (t - 2.0))
        step, evals = strong_wolfe(phi, 4.0, -4.0, 1.0, 1e-4, 0.9)
        self.assertIsNotNone(step)
        value, slope = phi(step)
        self.assertLessEqual(value, 4.0 + 1e-4 * step * -4.0)
        self.assertLessEqual(abs(slope), 0.9 * 4.0)
        self.assertGreaterEqual(evals, 1)

    def test_infeasible_trial_shrinks(self):
        """Test that non-finite trial values are backed away from."""
        phi = lambda t: ((np.inf, np.nan) if t > 0.5 else ((t - 0.4) ** 2, 2.0 * (t - 0.4)))
        step, _ = strong_wolfe(phi, 0.16, -0.8, 1.0)
        self.assertIsNotNone(step)
        self.assertLessEqual(step, 0.5)


class TestLbfgsAscent(unittest.TestCase):
    """Test cases for the quasi-Newton ascent."""

    def test_quadratic(self):
        """Test the maximiser of a concave quadratic within dim + 5 iterations."""
        dim = 10
        fun, c = _quadratic(dim, 0)
        trace = lbfgs_ascent(fun, np.zeros(dim), SolverConfig(grad_tol=1e-10))
        np.testing.assert_allclose(trace.u, c, atol=1e-8)
        self.assertLessEqual(trace.iterations, dim + 5)
        self.assertEqual(trace.termination, 'grad_tol')

    def test_history_nondecreasing(self):
        """Test that accepted values never decrease."""
        fun, _ = _quadratic(6, 1)
        trace = lbfgs_ascent(fun, np.full(6, 3.0), SolverConfig(grad_tol=1e-12))
        self.assertTrue(np.all(np.diff(trace.history) >= 0.0))
        self.assertEqual(trace.history[-1], trace.value)

    def test_iteration_cap(self):
        """Test the max_iters termination reason."""
        fun, _ = _quadratic(8, 2)
        trace = lbfgs_ascent(fun, np.zeros(8), SolverConfig(grad_tol=1e-14, max_iters=2))
        self.assertEqual(trace.iterations, 2)
        self.assertEqual(trace.termination, 'max_iters')

    def test_infeasible_start(self):
        """Test that a non-finite starting value is refused."""
        with self.assertRaises(InputError):
            lbfgs_ascent(lambda u: (-np.inf, None, None), np.zeros(2))

    def test_barrier(self):
        """Test that -inf regions are never accepted: maximise ln u - u on u > 0."""
        def fun(u):
            if u[0] <= 0.0:
                return -np.inf, None, None
            return float(np.log(u[0]) - u[0]), np.array([1.0 / u[0] - 1.0]), None

        trace = lbfgs_ascent(fun, np.array([5.0]), SolverConfig(grad_tol=1e-10))
        self.assertAlmostEqual(trace.u[0], 1.0, places=8)


class TestInitialGuess(unittest.TestCase):
    """Test cases for the spline starting point."""

    def test_linear_data(self):
        """Test that measurements z = t give x = 1 and z0 = 0."""
        spec = make_linear_gaussian(t_f=5.0)
        times = spec.measurement.sample_times
        problem = EstimationProblem(spec, times.copy())
        v = initial_guess(times, problem.y, problem.partition(1), spec.dynamics, spec.prior)
        np.testing.assert_allclose(v.x[:, 0], 1.0, atol=1e-3)
        self.assertAlmostEqual(float(v.z0[0]), 0.0, places=3)
        self.assertEqual(v.x.shape, (101, 1))

    def test_regression_recovers_linear_parameters(self):
        """Test the drift regression on a noise-free Duffing path."""
        spec = make_duffing('gaussian', t_f=20.0)
        steps = 4000
        traj = simulate(spec.dynamics, [0.5], [-0.5], spec.theta_nominal, 20.0,
                        SimConfig(h_sim=0.005), dW=np.zeros(steps), dZ=np.zeros(steps))
        times = spec.measurement.sample_times
        _, zs = traj.at(times)
        problem = EstimationProblem(spec, zs[:, :1])
        v = initial_guess(times, problem.y, problem.partition(0), spec.dynamics, spec.prior)
        a, b, d = v.theta[:3]
        self.assertAlmostEqual(b, -1.0, delta=0.05)
        self.assertAlmostEqual(d, 0.2, delta=0.01)
        self.assertAlmostEqual(a, 1.0, delta=0.1)
        self.assertGreater(v.theta[3], 0.0)

    def test_too_few_measurements(self):
        """Test that fewer than four measurements are rejected."""
        spec = make_linear_gaussian(t_f=5.0)
        with self.assertRaises(InputError):
            initial_guess(np.array([0.0, 0.1, 0.2]), np.zeros(3), _measurement_partition(spec),
                          spec.dynamics, spec.prior)

    def test_gcv_keeps_straight_lines(self):
        """Test that a straight line passes the smoother unchanged."""
        t = np.linspace(0.0, 1.0, 30)
        smooth, _ = gcv_smooth(t, 3.0 * t - 1.0)
        np.testing.assert_allclose(smooth, 3.0 * t - 1.0, atol=1e-9)


class TestEstimationProblem(unittest.TestCase):
    """Test cases for the benchmark and data bundle."""

    def test_measurement_grid(self):
        """Test that refinement 0 is the measurement grid."""
        spec = make_duffing('gaussian', t_f=5.0)
        problem = EstimationProblem(spec, np.zeros(51))
        np.testing.assert_allclose(problem.partition(0).nodes, spec.measurement.sample_times,
                                   atol=1e-12)
        self.assertEqual(problem.partition(2).N, 200)
        with self.assertRaises(DomainError):
            problem.partition(-1)

    def test_row_mismatch(self):
        """Test that the dataset needs one row per sample time."""
        with self.assertRaises(InputError):
            EstimationProblem(make_duffing('gaussian', t_f=5.0), np.zeros(50))

    def test_unknown_estimator(self):
        """Test that estimator names are checked."""
        problem = EstimationProblem(make_duffing('gaussian', t_f=5.0), np.zeros(51))
        with self.assertRaises(InputError):
            estimate(problem, 'ml')


class TestEstimate(unittest.TestCase):
    """Short Duffing estimation runs."""

    @classmethod
    def setUpClass(cls):
        cls.spec = make_duffing('gaussian', t_f=10.0)
        cls.truth, data = generate_dataset(cls.spec, 3)
        cls.problem = EstimationProblem(cls.spec, data)
        cls.results = {name: estimate(cls.problem, name) for name in ('map', 'mee')}

    def test_map_beats_truth(self):
        """Test that the MAP objective at the estimate exceeds its value at the truth."""
        partition = self.problem.partition(0)
        xs, zs = self.truth.at(partition.nodes)
        v_true = DecisionVector(partition, xs, zs[0], self.spec.theta_nominal)
        at_truth = evaluate('trapezoidal', self.spec.dynamics, self.spec.prior,
                            self.spec.measurement, self.problem.y, v_true).value
        self.assertGreaterEqual(self.results['map'].report.value, at_truth)

    def test_histories_nondecreasing(self):
        """Test monotone accepted objective values for both estimators."""
        for result in self.results.values():
            self.assertTrue(np.all(np.diff(result.history) >= 0.0))
            self.assertTrue(result.report.finite)

    def test_result_record(self):
        """Test the objective kind and termination recorded with each estimate."""
        self.assertEqual(self.results['map'].objective_kind, 'map_trapezoidal')
        self.assertEqual(self.results['mee'].objective_kind, 'mee_euler')
        for result in self.results.values():
            self.assertIn(result.termination, ('grad_tol', 'max_iters', 'line_search_failure'))
            self.assertGreater(result.evaluations, result.iterations)

    def test_deterministic(self):
        """Test that rerunning an estimator gives bit-identical output."""
        again = estimate(self.problem, 'mee')
        np.testing.assert_array_equal(again.v.flatten(), self.results['mee'].v.flatten())

    def test_unknown_objective(self):
        """Test that maximize checks the objective name."""
        with self.assertRaises(InputError):
            maximize('map_euler', self.problem, self.results['map'].v)


class TestMeshStability(unittest.TestCase):
    """Estimates on one Duffing dataset settle as the grid is refined."""

    def test_successive_differences_decrease(self):
        """Test shrinking x-path and parameter steps over refinements 0 to 3."""
        spec = make_duffing('gaussian', t_f=5.0)
        _, data = generate_dataset(spec, 3)
        problem = EstimationProblem(spec, data)
        cfg = SolverConfig(grad_tol=1e-8, max_iters=2000)
        for estimator in ('map', 'mee'):
            results = [estimate(problem, estimator, r, cfg) for r in range(4)]
            path_steps = [sup_norm_distance(b.v.x_path(), a.v.x_path())
                          for a, b in zip(results, results[1:])]
            theta_steps = [np.linalg.norm(b.v.theta - a.v.theta)
                           for a, b in zip(results, results[1:])]
            with self.subTest(estimator=estimator):
                self.assertTrue(np.all(np.diff(path_steps) < 0.0), msg=str(path_steps))
                self.assertTrue(np.all(np.diff(theta_steps) < 0.0), msg=str(theta_steps))


if __name__ == '__main__':
    unittest.main()
