"""Tests for the sdemap utils module."""

import os
import tempfile
import unittest

import numpy as np

from sdemap.errors import InputError
from sdemap.utils import (canonical_json, central_difference, config_hash, make_generator,
                          read_csv, read_json, smooth_clamp, spawn_generators, write_csv,
                          write_json)


class TestFiniteDifferences(unittest.TestCase):
    """Test cases for central differences."""

    def test_scalar_gradient(self):
        """Test the gradient of a quadratic form."""
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        x = np.array([0.5, -1.0])
        g = central_difference(lambda v: 0.5 * v @ A @ v, x)
        np.testing.assert_allclose(g, A @ x, rtol=1e-8)

    def test_vector_jacobian_shape(self):
        """Test that vector maps give out_shape + (len(x),)."""
        J = central_difference(lambda v: np.array([v[0] * v[1], np.sin(v[2]), 1.0]),
                               np.array([1.0, 2.0, 0.0]))
        self.assertEqual(J.shape, (3, 3))
        np.testing.assert_allclose(J[0], [2.0, 1.0, 0.0], atol=1e-8)
        np.testing.assert_allclose(J[1], [0.0, 0.0, 1.0], atol=1e-8)


class TestSmoothClamp(unittest.TestCase):
    """Test cases for the cosine-taper clamp."""

    def test_identity_inside(self):
        """Test that the clamp is the identity inside the box."""
        u = np.array([-1.0, 0.0, 4.9])
        value, d1, d2 = smooth_clamp(u, -5.0, 5.0)
        np.testing.assert_array_equal(value, u)
        np.testing.assert_array_equal(d1, 1.0)
        np.testing.assert_array_equal(d2, 0.0)

    def test_constant_beyond_margin(self):
        """Test saturation at hi + margin / 2 beyond the 10 % margin."""
        value, d1, _ = smooth_clamp(np.array([7.0, 100.0, -7.0]), -5.0, 5.0)
        np.testing.assert_allclose(value, [5.5, 5.5, -5.5])
        np.testing.assert_allclose(d1, 0.0, atol=1e-15)

    def test_derivatives_match_differences(self):
        """Test both derivatives inside the taper against finite differences."""
        u = np.array([5.3, 5.71, -5.2, -5.88])
        h = 1e-6
        value, d1, d2 = smooth_clamp(u, -5.0, 5.0)
        vp, d1p, _ = smooth_clamp(u + h, -5.0, 5.0)
        vm, d1m, _ = smooth_clamp(u - h, -5.0, 5.0)
        np.testing.assert_allclose(d1, (vp - vm) / (2 * h), rtol=1e-6)
        np.testing.assert_allclose(d2, (d1p - d1m) / (2 * h), rtol=1e-5, atol=1e-8)

    def test_monotone(self):
        """Test that the clamp is nondecreasing."""
        u = np.linspace(-8.0, 8.0, 4001)
        value, _, _ = smooth_clamp(u, -5.0, 5.0)
        self.assertTrue(np.all(np.diff(value) >= 0.0))


class TestSeeding(unittest.TestCase):
    """Test cases for generator construction."""

    def test_same_seed_same_stream(self):
        """Test that generators built from one seed agree."""
        a = make_generator(42).standard_normal(5)
        b = make_generator(42).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_spawned_streams_differ(self):
        """Test that spawned children are distinct but reproducible."""
        first = [g.standard_normal(3) for g in spawn_generators(7, 3)]
        again = [g.standard_normal(3) for g in spawn_generators(7, 3)]
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a, b)
        self.assertFalse(np.allclose(first[0], first[1]))


class TestPersistence(unittest.TestCase):
    """Test cases for JSON and CSV persistence."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_config_hash_ignores_key_order(self):
        """Test that the hash depends on content, not key order."""
        self.assertEqual(config_hash({'a': 1, 'b': [1.5, 2]}), config_hash({'b': [1.5, 2], 'a': 1}))
        self.assertNotEqual(config_hash({'a': 1}), config_hash({'a': 2}))
        self.assertEqual(canonical_json({'b': np.float64(0.5), 'a': np.arange(2)}),
                         '{"a":[0,1],"b":0.5}')

    def test_json_numpy_values(self):
        """Test writing numpy scalars and arrays as JSON."""
        path = os.path.join(self.tmp.name, 'sub', 'out.json')
        write_json(path, {'x': np.array([0.1, 1 / 3]), 'n': np.int64(3)})
        data = read_json(path)
        self.assertEqual(data['n'], 3)
        self.assertEqual(data['x'][1], 1 / 3)
        with open(path, 'rb') as f:
            self.assertTrue(f.read().endswith(b'\n'))

    def test_csv_is_exact(self):
        """Test that 17 significant digits restore every float exactly."""
        rows = make_generator(1).standard_normal((20, 3)) * 1e3
        path = os.path.join(self.tmp.name, 'table.csv')
        write_csv(path, ['t', 'x_1', 'z_1'], rows)
        header, back = read_csv(path)
        self.assertEqual(header, ['t', 'x_1', 'z_1'])
        np.testing.assert_array_equal(back, rows)
        with open(path, 'rb') as f:
            content = f.read()
        self.assertNotIn(b'\r', content)
        self.assertTrue(content.startswith(b't,x_1,z_1\n'))

    def test_malformed_csv(self):
        """Test that text cells and ragged rows are input errors."""
        for body in ('t,y_1\n0.0,abc\n', 't,y_1\n0.0,1.0\n0.1\n'):
            path = os.path.join(self.tmp.name, 'bad.csv')
            with open(path, 'w', encoding='utf-8') as f:
                f.write(body)
            with self.assertRaises(InputError):
                read_csv(path)


if __name__ == '__main__':
    unittest.main()
