import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from parallel import map_particles
from rng import ParticleStreams, antithetic_gaussian, derive_seed, gaussian_samples, psd_factor


class TestParticleStreams(unittest.TestCase):
    def test_same_seed_same_block(self):
        a = ParticleStreams(11).normals("model", 3, (8, 2))
        b = ParticleStreams(11).normals("model", 3, (8, 2))
        assert_array_equal(a, b)

    def test_channels_and_steps_differ(self):
        streams = ParticleStreams(11)
        base = streams.normals("model", 0, (4, 2))
        self.assertFalse(np.array_equal(base, streams.normals("obs_m", 0, (4, 2))))
        self.assertFalse(np.array_equal(base, streams.normals("model", 1, (4, 2))))
        self.assertFalse(np.array_equal(base, ParticleStreams(12).normals("model", 0, (4, 2))))

    def test_rows_do_not_depend_on_ensemble_size(self):
        streams = ParticleStreams(5)
        big = streams.normals("obs_v", 7, (10, 2, 2))
        small = streams.normals("obs_v", 7, (4, 2, 2))
        assert_array_equal(big[:4], small)

    def test_unknown_channel(self):
        with self.assertRaises(ValueError):
            ParticleStreams(0).normals("bogus", 0, (2,))

    def test_empty_block(self):
        self.assertEqual(ParticleStreams(0).normals("model", 0, (5, 0)).shape, (5, 0))

    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, 0.5, 64, 2), derive_seed(1, 0.5, 64, 2))
        self.assertNotEqual(derive_seed(1, 0.5, 64, 2), derive_seed(1, 0.5, 64, 3))
        self.assertGreaterEqual(derive_seed(1, "truth"), 0)


class TestSampling(unittest.TestCase):
    def test_antithetic_mean_is_exact(self):
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        z = antithetic_gaussian(np.zeros(2), cov, 200, ParticleStreams(4))
        self.assertEqual(z.shape, (200, 2))
        assert_allclose(z.mean(axis=0), 0.0, atol=1e-13)

    def test_antithetic_needs_even_size(self):
        with self.assertRaises(ValueError):
            antithetic_gaussian(np.zeros(1), np.eye(1), 5, ParticleStreams(0))

    def test_gaussian_sample_moments(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = gaussian_samples(np.array([1.0, -1.0]), cov, 40000, ParticleStreams(9))
        assert_allclose(x.mean(axis=0), [1.0, -1.0], atol=0.05)
        assert_allclose(np.cov(x.T), cov, atol=0.06)

    def test_psd_factor_singular(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        f = psd_factor(cov)
        assert_allclose(f @ f.T, cov, atol=1e-12)


class TestMapParticles(unittest.TestCase):
    def test_chunked_equals_serial(self):
        data = np.random.default_rng(0).standard_normal((37, 3))

        def rows_fn(rows):
            return np.einsum("ni,ni->n", data[rows], data[rows])[:, None] * data[rows]

        serial = map_particles(rows_fn, 37, 1)
        threaded = map_particles(rows_fn, 37, 4)
        assert_array_equal(serial, threaded)

    def test_small_ensembles_stay_serial(self):
        calls = []

        def rows_fn(rows):
            calls.append(rows)
            return np.zeros((rows.stop - rows.start, 1))

        map_particles(rows_fn, 3, 4)
        self.assertEqual(calls, [slice(0, 3)])


if __name__ == "__main__":
    unittest.main()
