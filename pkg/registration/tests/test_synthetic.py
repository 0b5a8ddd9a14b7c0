import numpy as np
from django.test import SimpleTestCase

from registration.exceptions import RegistrationError, ShapeError
from registration.metrics import fold_percentage
from registration.synthetic import (
    FAMILIES, SyntheticSpec, corrupt_gaussian, corrupt_mixed, generate_pair, generate_pairs, smooth_displacement,
)


class GeneratePairTests(SimpleTestCase):
    """
    Tests for synthetic pairs with known deformations.
    """

    def test_zero_displacement_gives_identical_images(self):
        pair = generate_pair(SyntheticSpec(shape=(16, 16), max_displacement=0.0))
        np.testing.assert_array_equal(pair.fixed, pair.moving)
        np.testing.assert_array_equal(pair.ground_truth, np.zeros((2, 16, 16)))
        for label in pair.labels:
            np.testing.assert_array_equal(pair.fixed_masks[label], pair.moving_masks[label])

    def test_generation_is_seeded(self):
        spec = SyntheticSpec(shape=(24, 24), seed=5)
        first, second = generate_pair(spec), generate_pair(spec)
        np.testing.assert_array_equal(first.moving, second.moving)
        np.testing.assert_array_equal(first.ground_truth, second.ground_truth)
        other = generate_pair(SyntheticSpec(shape=(24, 24), seed=6))
        self.assertFalse(np.array_equal(first.moving, other.moving))

    def test_every_family_is_fold_free_and_normalised(self):
        for family in FAMILIES:
            with self.subTest(family=family):
                pair = generate_pair(SyntheticSpec(shape=(32, 32), family=family, max_displacement=3.0))
                self.assertEqual(fold_percentage(pair.ground_truth), 0.0)
                self.assertAlmostEqual(pair.moving.min(), 0.0, places=12)
                self.assertAlmostEqual(pair.moving.max(), 1.0, places=12)
                self.assertTrue(pair.labels)

    def test_three_dimensional_pair(self):
        pair = generate_pair(SyntheticSpec(shape=(8, 12, 12), max_displacement=1.0))
        self.assertEqual(pair.fixed.shape, (8, 12, 12))
        self.assertEqual(pair.ground_truth.shape, (3, 8, 12, 12))

    def test_folding_deformations_exhaust_the_attempts(self):
        spec = SyntheticSpec(shape=(16, 16), max_displacement=50.0, smoothness=0.5)
        with self.assertRaises(RegistrationError):
            generate_pair(spec, max_attempts=1)

    def test_generate_pairs_numbers_the_ids(self):
        pairs = generate_pairs(3, SyntheticSpec(shape=(16, 16), max_displacement=1.0, seed=2))
        self.assertEqual(list(pairs), ['pair-0000', 'pair-0001', 'pair-0002'])
        self.assertEqual(pairs['pair-0001'].pair_id, 'pair-0001')
        self.assertFalse(np.array_equal(pairs['pair-0000'].moving, pairs['pair-0001'].moving))

    def test_smooth_displacement_is_scaled_to_the_magnitude(self):
        field = smooth_displacement((20, 20), 2.5, 3.0, np.random.default_rng(0))
        self.assertAlmostEqual(np.sqrt((field ** 2).sum(axis=0)).max(), 2.5, places=12)

    def test_invalid_specs_raise(self):
        with self.assertRaises(ShapeError):
            SyntheticSpec(shape=(4, 16))
        with self.assertRaises(ShapeError):
            SyntheticSpec(shape=(16,))
        for kwargs in ({'family': 'stars'}, {'max_displacement': -1.0}, {'labels': 0}):
            with self.subTest(**kwargs), self.assertRaises(ValueError):
                SyntheticSpec(**kwargs)


class CorruptionTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.image = self.rng.random((10, 10))

    def test_gaussian_noise(self):
        np.testing.assert_array_equal(corrupt_gaussian(self.image, 0.0), self.image)
        noisy = corrupt_gaussian(self.image, 0.3, seed=4)
        self.assertTrue(np.all((noisy >= 0.0) & (noisy <= 1.0)))
        self.assertFalse(np.array_equal(noisy, self.image))
        np.testing.assert_array_equal(noisy, corrupt_gaussian(self.image, 0.3, seed=4))
        with self.assertRaises(ValueError):
            corrupt_gaussian(self.image, -0.1)

    def test_mixing(self):
        other = self.rng.random((10, 10))
        np.testing.assert_array_equal(corrupt_mixed(self.image, other, 0.0), self.image)
        np.testing.assert_array_equal(corrupt_mixed(self.image, other, 1.0), other)
        np.testing.assert_allclose(corrupt_mixed(self.image, other, 0.25), 0.25 * other + 0.75 * self.image)
        with self.assertRaises(ValueError):
            corrupt_mixed(self.image, other, 1.5)
        with self.assertRaises(ShapeError):
            corrupt_mixed(self.image, other[:5], 0.5)
