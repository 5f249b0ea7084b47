"""Tests for the metrics module."""

import json
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sdemap.errors import DomainError, InputError
from sdemap.grid import PwlPath, uniform_partition
from sdemap.metrics import (STATISTICS, RunSummary, aggregate, ise, quartiles,
                            run_summary_from_dict, run_summary_to_dict)
from sdemap.sim import Trajectory


def _truth(x, z, t_f=1.0, step=0.005):
    times = np.linspace(0.0, t_f, int(round(t_f / step)) + 1)
    return Trajectory(times=times, x=np.asarray(x(times)).reshape(-1, 1),
                      z=np.asarray(z(times)).reshape(-1, 1), theta=np.zeros(0), seed=0,
                      metadata={})


def _run(replicate, d_map, d_mee, error=None):
    return RunSummary(replicate=replicate, seed=100 + replicate,
                      theta={'map': {'d': d_map}, 'mee': {'d': d_mee}},
                      ise={'map': 0.1 * replicate, 'mee': 0.05 * replicate},
                      objective={'map': -10.0 - replicate, 'mee': -12.0 - replicate},
                      error=error)


class TestIse(unittest.TestCase):
    """Test cases for the integrated square error."""

    def test_exact_estimate(self):
        """Test zero error for an estimate equal to the truth at the nodes of a line."""
        truth = _truth(lambda t: 2.0 * t, lambda t: -t)
        p = uniform_partition(1.0, 10)
        self.assertAlmostEqual(ise(truth, PwlPath(p, 2.0 * p.nodes), PwlPath(p, -p.nodes)), 0.0,
                               places=24)

    def test_constant_offset(self):
        """Test that a constant 0.1 offset in x gives 0.01."""
        truth = _truth(lambda t: np.sin(t), lambda t: np.zeros_like(t))
        fine = uniform_partition(1.0, 200)
        x_hat = PwlPath(fine, np.sin(fine.nodes) + 0.1)
        z_hat = PwlPath(fine, np.zeros(201))
        self.assertAlmostEqual(ise(truth, x_hat, z_hat), 0.01, places=10)

    def test_ramp(self):
        """Test that a ramp error t in z integrates to 1/3."""
        truth = _truth(lambda t: np.zeros_like(t), lambda t: t)
        p = uniform_partition(1.0, 4)
        value = ise(truth, PwlPath(p, np.zeros(5)), PwlPath(p, np.zeros(5)))
        self.assertAlmostEqual(value, 1.0 / 3.0, delta=1e-4)

    def test_horizon_mismatch(self):
        """Test that the estimate must cover the truth's horizon."""
        truth = _truth(np.zeros_like, np.zeros_like)
        p = uniform_partition(2.0, 4)
        with self.assertRaises(DomainError):
            ise(truth, PwlPath(p, np.zeros(5)), PwlPath(p, np.zeros(5)))


class TestQuartiles(unittest.TestCase):
    """Test cases for the five-number summary."""

    def test_five_values(self):
        """Test quartiles 2 and 4 for the values 1..5."""
        summary = quartiles([5, 3, 1, 4, 2])
        self.assertEqual(summary, {'median': 3.0, 'lower_quartile': 2.0,
                                   'upper_quartile': 4.0, 'min': 1.0, 'max': 5.0})
        self.assertEqual(tuple(summary), STATISTICS)

    def test_even_count(self):
        """Test the halves of an even sample."""
        summary = quartiles([1, 2, 3, 4])
        self.assertEqual(summary['lower_quartile'], 1.5)
        self.assertEqual(summary['upper_quartile'], 3.5)
        self.assertEqual(summary['median'], 2.5)

    def test_single_value(self):
        """Test that one value gives five equal statistics."""
        self.assertEqual(set(quartiles([0.7]).values()), {0.7})

    def test_empty(self):
        """Test that an empty sample cannot be summarised."""
        with self.assertRaises(InputError):
            quartiles([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.randoms())
    def test_permutation_invariant(self, values, random):
        """Test that the summary ignores the order of the values."""
        shuffled = list(values)
        random.shuffle(shuffled)
        self.assertEqual(quartiles(values), quartiles(shuffled))
        summary = quartiles(values)
        self.assertLessEqual(summary['min'], summary['lower_quartile'])
        self.assertLessEqual(summary['lower_quartile'], summary['median'])
        self.assertLessEqual(summary['median'], summary['upper_quartile'])
        self.assertLessEqual(summary['upper_quartile'], summary['max'])


class TestAggregate(unittest.TestCase):
    """Test cases for Monte Carlo aggregation."""

    def test_failed_runs_excluded(self):
        """Test that runs with an error do not enter the statistics."""
        runs = [_run(0, 0.2, 0.1), _run(1, 0.3, 0.2), _run(2, 9.0, 9.0, error='diverged')]
        result = aggregate(runs)
        self.assertEqual(result['map']['d']['max'], 0.3)
        self.assertAlmostEqual(result['mee']['d']['median'], 0.15)
        self.assertEqual(sorted(result['map']), ['d', 'ise', 'objective'])

    def test_order_independent(self):
        """Test that the input order does not matter."""
        runs = [_run(i, 0.1 * i, 0.05 * i) for i in range(7)]
        self.assertEqual(aggregate(runs), aggregate(runs[::-1]))

    def test_nothing_completed(self):
        """Test that an all-failed batch is an input error."""
        with self.assertRaises(InputError):
            aggregate([_run(0, 0.2, 0.1, error='boom')])

    def test_rederived_from_json_lines(self):
        """Test bit-exact re-aggregation from serialised run records."""
        runs = [_run(i, 0.1 + 1e-3 * i ** 2, 1 / (i + 3)) for i in range(9)]
        lines = [json.dumps(run_summary_to_dict(r), sort_keys=True) for r in runs]
        back = [run_summary_from_dict(json.loads(line)) for line in lines]
        self.assertEqual(aggregate(back), aggregate(runs))
        self.assertTrue(all(r.completed for r in back))


if __name__ == '__main__':
    unittest.main()
