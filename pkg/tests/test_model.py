"""Tests for the model module: benchmarks, likelihoods and the registry."""

import logging
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from sdemap.errors import DomainError, InputError
from sdemap.model import (DynamicsModel, benchmark_names, fix_parameters, gaussian_loglik,
                          gaussian_loglik_grad, get_benchmark, make_duffing, make_holmes_rand,
                          outlier_mixture_sample, quantized_loglik, quantized_loglik_grad,
                          quantized_masses, student_t4_loglik, student_t4_loglik_grad,
                          with_outlier_sampler)
from sdemap.utils import central_difference, make_generator


def _interior_points(rng, count, lo=-3.0, hi=3.0):
    t = rng.uniform(0.0, 50.0, count)
    x = rng.uniform(lo, hi, (count, 1))
    z = rng.uniform(lo, hi, (count, 1))
    return t, x, z


class TestDuffing(unittest.TestCase):
    """Test cases for the Duffing benchmark."""

    def setUp(self):
        self.spec = make_duffing('gaussian')
        self.model = self.spec.dynamics
        self.theta = self.spec.theta_nominal

    def test_nominal_values(self):
        """Test the nominal parameters, sampling period and measurement count."""
        np.testing.assert_array_equal(self.theta, [1.0, -1.0, 0.2, 0.1])
        self.assertEqual(self.spec.parameter_names, ('a', 'b', 'd', 'sigma_y'))
        self.assertEqual(self.spec.t_s, 0.1)
        self.assertEqual(self.spec.measurement.sample_times.size, 501)
        self.assertEqual(self.spec.measurement.sample_times[10], 1.0)

    def test_forcing_at_origin(self):
        """Test that f reduces to gamma cos 0 = 0.3 at the origin."""
        self.assertAlmostEqual(float(self.model.f(0.0, np.zeros(1), np.zeros(1), self.theta)[0]),
                               0.3)

    def test_divergence_is_minus_d(self):
        """Test div_x f = -d at arbitrary interior points."""
        t, x, z = _interior_points(make_generator(0), 20)
        np.testing.assert_allclose(self.model.divergence(t, x, z, self.theta), -0.2)

    def test_analytic_divergence_matches_differences(self):
        """Test analytic divergence against central differences at 100 points."""
        for name in benchmark_names():
            spec = get_benchmark(name)
            t, x, z = _interior_points(make_generator(1), 100)
            x = np.repeat(x, spec.dynamics.n, axis=1)
            z = np.repeat(z, spec.dynamics.q, axis=1)
            analytic = spec.dynamics.divergence(t, x, z, spec.theta_nominal)
            numeric = spec.dynamics.numerical_divergence(t, x, z, spec.theta_nominal)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9, err_msg=name)

    def test_analytic_jacobians_match_differences(self):
        """Test the supplied Jacobian hooks against central differences."""
        rng = make_generator(2)
        t, x, z = _interior_points(rng, 5)
        fx, fz, fth = self.model.noisy_jacobians(t, x, z, self.theta)
        for k in range(5):
            def f_flat(v):
                return self.model.f(t[k], v[:1], v[1:2], v[2:])
            J = central_difference(f_flat, np.concatenate([x[k], z[k], self.theta]))
            np.testing.assert_allclose(np.concatenate([fx[k], fz[k], fth[k]], axis=1), J,
                                       rtol=1e-6, atol=1e-8)

    def test_clamp_outside_box(self):
        """Test that the drift saturates outside the validity box."""
        far = self.model.f(0.0, np.zeros(1), np.array([50.0]), self.theta)
        beyond = self.model.f(0.0, np.zeros(1), np.array([80.0]), self.theta)
        np.testing.assert_array_equal(far, beyond)
        self.assertTrue(np.all(np.isfinite(far)))
        self.assertFalse(self.model.in_box(np.zeros((1, 1)), np.array([[6.0]]))[0])

    def test_prior_gradient_matches_differences(self):
        """Test the prior log-density gradient at a random support point."""
        prior = self.spec.prior
        x0, z0, theta = np.array([0.3]), np.array([-0.2]), np.array([0.7, -1.2, 0.3, 0.15])
        gx, gz, gth = prior.gradient(x0, z0, theta)
        numeric = central_difference(lambda v: prior.log_density(v[:1], v[1:2], v[2:]),
                                     np.concatenate([x0, z0, theta]))
        np.testing.assert_allclose(np.concatenate([gx, gz, gth]), numeric, rtol=1e-6)

    def test_prior_support(self):
        """Test that sigma_y <= 0 lies outside the prior support."""
        prior = self.spec.prior
        self.assertEqual(prior.log_density([0.0], [0.0], [1.0, -1.0, 0.2, -0.1]), -np.inf)
        self.assertTrue(np.isfinite(prior.log_density([0.0], [0.0], self.theta)))

    def test_prior_samples_in_support(self):
        """Test that prior draws satisfy the support indicator."""
        rng = make_generator(3)
        for _ in range(200):
            _, _, theta = self.spec.prior.sample(rng)
            self.assertTrue(self.spec.prior.support_indicator(theta))

    def test_diffusion_invertible(self):
        """Test the invertibility check on G and a singular matrix."""
        self.assertTrue(self.model.is_diffusion_invertible())
        singular = DynamicsModel(n=2, q=0, m=0, drift_noisy=lambda t, x, z, th: x,
                                 drift_clean=lambda t, x, z, th: z,
                                 diffusion=np.array([[1.0, 2.0], [2.0, 4.0]]))
        self.assertFalse(singular.is_diffusion_invertible())
        with self.assertRaises(DomainError):
            singular.diffusion_inverse

    def test_pure_closures(self):
        """Test bit-identical results on repeated evaluation."""
        t, x, z = _interior_points(make_generator(4), 10)
        a = self.model.f(t, x, z, self.theta)
        b = self.model.f(t, x, z, self.theta)
        np.testing.assert_array_equal(a, b)

    def test_unknown_measurement_kind(self):
        """Test that an unknown likelihood name is rejected."""
        with self.assertRaises(InputError):
            make_duffing('laplace')

    def test_missing_lipschitz_hint_warns(self):
        """Test that the contraction check is skipped with a warning."""
        with self.assertLogs('sdemap.model', level=logging.WARNING):
            model = DynamicsModel(n=1, q=0, m=0, drift_noisy=lambda t, x, z, th: -x,
                                  drift_clean=lambda t, x, z, th: z,
                                  diffusion=np.eye(1), name='no-hint-model')
            self.assertIsNone(model.check_contraction(0.1))


class TestHolmesRand(unittest.TestCase):
    """Test cases for the Holmes-Rand benchmark."""

    def setUp(self):
        self.spec = make_holmes_rand()
        self.theta = self.spec.theta_nominal

    def test_nominal_values(self):
        """Test nominal parameters and the 501 measurement times."""
        np.testing.assert_array_equal(self.theta, [0.2, -1.0, 0.2, 1.0, 0.05])
        self.assertEqual(self.spec.measurement.sample_times.size, 501)
        self.assertEqual(self.spec.measurement.kind, 'quantized')

    def test_forcing_at_origin(self):
        """Test that f reduces to phi = 0.4 at the origin."""
        value = self.spec.dynamics.f(0.0, np.zeros(1), np.zeros(1), self.theta)
        self.assertAlmostEqual(float(value[0]), 0.4)

    def test_divergence(self):
        """Test div_x f = -(a + gamma z^2) at z = 1."""
        value = self.spec.dynamics.divergence(0.0, np.zeros(1), np.ones(1), self.theta)
        self.assertAlmostEqual(float(value), -0.4)

    def test_samples_on_lattice(self):
        """Test that simulated measurements are multiples of l_b."""
        rng = make_generator(5)
        zs = rng.uniform(-1, 1, (501, 1))
        y = self.spec.measurement.sample(np.zeros((501, 1)), zs, self.theta, rng)
        k = np.round(y / 0.05)
        np.testing.assert_allclose(y, k * 0.05, atol=1e-12)


class TestLikelihoods(unittest.TestCase):
    """Test cases for the measurement log-likelihoods."""

    def test_gaussian_zero_residual(self):
        """Test zero residuals with sigma_y = 1."""
        self.assertEqual(gaussian_loglik(np.arange(5.0), np.arange(5.0), 1.0), 0.0)

    def test_gaussian_single(self):
        """Test a single residual of 0.1 at sigma_y = 0.1."""
        self.assertAlmostEqual(gaussian_loglik([0.1], [0.0], 0.1), -0.5 - np.log(0.1))

    def test_gaussian_sigma_gradient(self):
        """Test the sigma_y derivative against central differences."""
        y, z = np.array([0.3, -0.1, 0.05]), np.zeros(3)
        _, dsigma = gaussian_loglik_grad(y, z, 0.2)
        numeric = central_difference(lambda s: gaussian_loglik(y, z, s[0]), np.array([0.2]))[0]
        self.assertAlmostEqual(dsigma, numeric, delta=1e-6 * abs(numeric))

    def test_gaussian_stationary_sigma(self):
        """Test that the sigma_y derivative changes sign at the RMS residual."""
        y, z = np.array([0.3, -0.1, 0.05, 0.2]), np.zeros(4)
        rms = np.sqrt(np.mean(y ** 2))
        self.assertGreater(gaussian_loglik_grad(y, z, 0.99 * rms)[1], 0.0)
        self.assertLess(gaussian_loglik_grad(y, z, 1.01 * rms)[1], 0.0)

    def test_scale_must_be_positive(self):
        """Test that non-positive scales are domain errors."""
        for fun in (gaussian_loglik, student_t4_loglik):
            with self.assertRaises(DomainError):
                fun([0.0], [0.0], 0.0)
        with self.assertRaises(DomainError):
            quantized_loglik([0.0], [0.0], 0.1, -1.0)

    def test_student_t_values(self):
        """Test zero residuals and a residual of two scales."""
        self.assertEqual(student_t4_loglik(np.zeros(3), np.zeros(3), 1.0), 0.0)
        self.assertAlmostEqual(student_t4_loglik([0.6], [0.0], 0.3),
                               -2.5 * np.log(2.0) - np.log(0.3))

    def test_student_t_heavier_tail(self):
        """Test that a large residual costs less under the t likelihood."""
        self.assertGreater(student_t4_loglik([10.0], [0.0], 0.1),
                           gaussian_loglik([10.0], [0.0], 0.1))

    def test_student_t_gradient(self):
        """Test both derivatives against central differences."""
        y, z = np.array([0.4, -1.5]), np.array([0.1, 0.2])
        dz, dsigma = student_t4_loglik_grad(y, z, 0.3)
        numeric = central_difference(lambda v: student_t4_loglik(y, v[:2], v[2]),
                                     np.array([0.1, 0.2, 0.3]))
        np.testing.assert_allclose(np.concatenate([dz, [dsigma]]), numeric, rtol=1e-6)

    def test_quantized_centered(self):
        """Test ln(Phi(5) - Phi(-5)) per centered measurement."""
        expected = np.log(norm.cdf(5.0) - norm.cdf(-5.0))
        self.assertAlmostEqual(quantized_loglik([2.0], [2.0], 0.1, 1.0), expected, places=12)
        self.assertAlmostEqual(expected, -5.733e-7, delta=1e-9)

    def test_quantized_decreasing_in_sigma(self):
        """Test that the centered mass falls as sigma_y grows."""
        values = [quantized_loglik([0.0], [0.0], s, 0.05) for s in (0.1, 1.0, 10.0)]
        self.assertGreater(values[0], values[1])
        self.assertGreater(values[1], values[2])

    def test_quantized_far_tail_finite(self):
        """Test that far-tail residuals stay finite."""
        value = quantized_loglik([0.0], [3.0], 0.05, 0.05)
        self.assertTrue(np.isfinite(value))
        self.assertLess(value, -1000.0)

    def test_quantized_narrow_bin(self):
        """Test bins much narrower than sigma_y against width times density."""
        sigma, l_b = 1e3, 0.05
        for z in (0.0, 100.0, -250.0):
            expected = np.log(l_b * norm.pdf(z, scale=sigma))
            self.assertAlmostEqual(quantized_loglik([0.0], [z], sigma, l_b), expected, places=8)

    def test_quantized_off_lattice(self):
        """Test that a value off the lattice is an input error."""
        with self.assertRaises(InputError):
            quantized_loglik([0.026], [0.0], 0.05, 0.05)

    def test_quantized_gradient(self):
        """Test both derivatives against central differences."""
        y = np.array([0.05, -0.1, 0.0])
        z = np.array([0.06, -0.07, 0.01])
        dz, dsigma = quantized_loglik_grad(y, z, 0.04, 0.05)
        numeric = central_difference(lambda v: quantized_loglik(y, v[:3], v[3], 0.05),
                                     np.array([0.06, -0.07, 0.01, 0.04]))
        np.testing.assert_allclose(np.concatenate([dz, [dsigma]]), numeric, rtol=1e-5)

    def test_quantized_masses_sum_to_one(self):
        """Test normalisation over the bin lattice for 100 random (z, sigma_y)."""
        rng = make_generator(6)
        bins = np.arange(-4000, 4001)
        for _ in range(100):
            z = rng.uniform(-5.0, 5.0)
            sigma = rng.uniform(0.01, 2.0)
            self.assertAlmostEqual(float(np.sum(quantized_masses(z, sigma, 0.05, bins))), 1.0,
                                   delta=1e-9)

    def test_permutation_invariance(self):
        """Test that reordering (time, value) pairs leaves each likelihood unchanged."""
        rng = make_generator(7)
        z = rng.standard_normal(10)
        y = np.round((z + 0.1 * rng.standard_normal(10)) / 0.05) * 0.05
        perm = rng.permutation(10)
        for fun in (lambda a, b: gaussian_loglik(a, b, 0.1),
                    lambda a, b: student_t4_loglik(a, b, 0.1),
                    lambda a, b: quantized_loglik(a, b, 0.1, 0.05)):
            self.assertAlmostEqual(fun(y, z), fun(y[perm], z[perm]), places=10)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2.0, 2.0), st.floats(0.05, 1.0))
    def test_continuity_in_z(self, z, sigma):
        """Test small-perturbation continuity of every likelihood in z."""
        y = np.array([0.1])
        for fun in (lambda zz: gaussian_loglik(y, zz, sigma),
                    lambda zz: student_t4_loglik(y, zz, sigma),
                    lambda zz: quantized_loglik(y, zz, sigma, 0.05)):
            a, b = fun(np.array([z])), fun(np.array([z + 1e-9]))
            self.assertLess(abs(a - b), 1e-5 * (1.0 + abs(a)))


class TestOutlierMixture(unittest.TestCase):
    """Test cases for the outlier mixture sampler."""

    def _variance_check(self, p_o, expected):
        y = outlier_mixture_sample(np.zeros(10000), 0.2, 1.0, p_o, 11)
        var = np.var(y)
        # standard error of a sample variance of normals: sigma^2 sqrt(2 / n)
        self.assertLess(abs(var - expected), 3.0 * expected * np.sqrt(2.0 / 10000))

    def test_regular_only(self):
        """Test the empirical variance at p_o = 0."""
        self._variance_check(0.0, 0.04)

    def test_outliers_only(self):
        """Test the empirical variance at p_o = 1."""
        self._variance_check(1.0, 1.0)

    def test_deterministic(self):
        """Test that draws depend only on the seed."""
        a = outlier_mixture_sample(np.arange(5.0), 0.2, 1.0, 0.4, 3)
        b = outlier_mixture_sample(np.arange(5.0), 0.2, 1.0, 0.4, 3)
        np.testing.assert_array_equal(a, b)

    def test_invalid_probability(self):
        """Test that p_o outside [0, 1] is a domain error."""
        with self.assertRaises(DomainError):
            outlier_mixture_sample(np.zeros(3), 0.2, 1.0, 1.5, 0)

    def test_attach_to_gaussian_benchmark(self):
        """Test that the mixture sampler swaps data generation only."""
        spec = with_outlier_sampler(make_duffing('gaussian', t_f=5.0), 0.4, 1.0, 0.2)
        self.assertEqual(spec.measurement.kind, 'gaussian')
        self.assertEqual(spec.options['p_o'], 0.4)


class TestRegistry(unittest.TestCase):
    """Test cases for the benchmark registry and the known/unknown split."""

    def test_registered_names(self):
        """Test the shipped benchmark names."""
        for name in ('duffing-gaussian', 'duffing-student-t', 'duffing-outliers',
                     'holmes-rand', 'linear-gaussian'):
            self.assertIn(name, benchmark_names())

    def test_unknown_name(self):
        """Test that an unregistered benchmark is an input error."""
        with self.assertRaises(InputError):
            get_benchmark('van-der-pol')

    def test_horizon_must_be_multiple(self):
        """Test that t_f must be a multiple of t_s."""
        with self.assertRaises(DomainError):
            make_duffing('gaussian', t_f=5.05)

    def test_fix_parameters(self):
        """Test that fixing sigma_y removes it and keeps the drift unchanged."""
        spec = make_duffing('gaussian', t_f=5.0)
        fixed = fix_parameters(spec, {'sigma_y': 0.1})
        self.assertEqual(fixed.parameter_names, ('a', 'b', 'd'))
        self.assertEqual(fixed.dynamics.m, 3)
        t, x, z = _interior_points(make_generator(8), 4)
        np.testing.assert_array_equal(fixed.dynamics.f(t, x, z, fixed.theta_nominal),
                                      spec.dynamics.f(t, x, z, spec.theta_nominal))
        _, _, fth = fixed.dynamics.noisy_jacobians(t, x, z, fixed.theta_nominal)
        self.assertEqual(fth.shape, (4, 1, 3))

    def test_fix_unknown_parameter(self):
        """Test that fixing a name the benchmark lacks is an input error."""
        with self.assertRaises(InputError):
            fix_parameters(make_duffing('gaussian', t_f=5.0), {'omega': 1.0})


if __name__ == '__main__':
    unittest.main()
