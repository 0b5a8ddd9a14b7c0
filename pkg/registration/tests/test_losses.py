import numpy as np
from django.test import SimpleTestCase

from registration.autodiff import Tensor
from registration.diffeo import integrate, warp
from registration.exceptions import ShapeError
from registration.losses import LossConfig, lcc, smoothness, total_loss, weight_norm
from registration.synthetic import FAMILIES, SyntheticSpec, render_image

from .mixins import GradientCheckMixin


def window_sum_of_squares(image, window):
    """Sum of squared deviations from the mean over each in-grid window, by loops."""
    half = window // 2
    out = np.empty(image.shape)
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            patch = image[max(i - half, 0):i + half + 1, max(j - half, 0):j + half + 1]
            out[i, j] = ((patch - patch.mean()) ** 2).sum()
    return out


class LocalCorrelationTests(SimpleTestCase):
    """
    Tests for the local normalised cross-correlation.
    """

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.image = self.rng.random((64, 64))

    def test_identical_images_correlate_fully(self):
        self.assertAlmostEqual(lcc(self.image, self.image).item(), 1.0, delta=1e-6)

    def test_positive_affine_intensity_change_keeps_full_correlation(self):
        self.assertAlmostEqual(lcc(self.image, 2.0 * self.image + 0.1).item(), 1.0, delta=1e-6)

    def test_symmetric_in_its_arguments(self):
        other = self.rng.random((64, 64))
        self.assertEqual(lcc(self.image, other).item(), lcc(other, self.image).item())

    def test_independent_noise_correlates_weakly(self):
        for _ in range(20):
            a, b = self.rng.random((2, 32, 32))
            value = lcc(a, b).item()
            self.assertGreaterEqual(value, 0.0)
            self.assertLess(value, 0.1)

    def test_rendered_images_follow_the_variance_floor(self):
        """
        Test lcc(I, I) on synthetic images against a brute-force window oracle.

        Windows whose variance product clears ε score exactly 1, flatter ones
        score product / ε, and the result never falls below the additive guard.
        """
        eps = 1e-5
        for family in FAMILIES:
            with self.subTest(family=family):
                image, _ = render_image(SyntheticSpec(shape=(32, 32), family=family, seed=3), np.random.default_rng(3))
                products = window_sum_of_squares(image, 9) ** 2
                value = lcc(image, image, window=9, epsilon_var=eps).item()
                self.assertAlmostEqual(value, np.minimum(products / eps, 1.0).mean(), delta=1e-9)
                self.assertGreaterEqual(value, (products / (products + eps)).mean())
                self.assertGreaterEqual(value + 1e-12, np.mean(products >= eps))

    def test_flat_windows_do_not_reward_a_flat_partner(self):
        textured = self.rng.random((16, 16))
        self.assertLess(lcc(textured, np.full((16, 16), 0.5), window=5).item(), 1e-12)

    def test_bounded_by_one(self):
        a, b = self.rng.normal(size=(2, 24, 24))
        self.assertLessEqual(lcc(a, b, window=3).item(), 1.0)

    def test_window_errors(self):
        with self.assertRaises(ShapeError):
            lcc(np.ones((4, 4)), np.ones((4, 4)), window=5)
        with self.assertRaises(ValueError):
            lcc(self.image, self.image, window=4)
        with self.assertRaises(ShapeError):
            lcc(self.image, self.image[:32])


class SmoothnessTests(SimpleTestCase):
    """
    Tests for the gradient penalty on vector fields.
    """

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_constant_field_is_free(self):
        self.assertEqual(smoothness(np.full((2, 6, 6), 3.0)).item(), 0.0)

    def test_unit_ramp(self):
        self.assertAlmostEqual(smoothness(np.arange(8.0).reshape(1, 8)).item(), 1.0, places=12)

    def test_scales_quadratically(self):
        field = self.rng.normal(size=(2, 6, 7))
        self.assertAlmostEqual(smoothness(3.0 * field).item(), 9.0 * smoothness(field).item(), places=10)

    def test_matches_loop_oracle(self):
        """
        Test against per-axis mean squared forward differences averaged over the two directions.
        """
        field = self.rng.normal(size=(2, 5, 6))
        along_rows = np.mean([
            (field[c, i + 1, j] - field[c, i, j]) ** 2 for c in range(2) for i in range(4) for j in range(6)
        ])
        along_columns = np.mean([
            (field[c, i, j + 1] - field[c, i, j]) ** 2 for c in range(2) for i in range(5) for j in range(5)
        ])
        self.assertAlmostEqual(smoothness(field).item(), (along_rows + along_columns) / 2, places=12)


class TotalLossTests(GradientCheckMixin, SimpleTestCase):
    """
    Tests for the combined training objective.
    """

    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.moving = self.rng.random((16, 16))
        self.fixed = self.rng.random((16, 16))
        self.velocity = self.rng.uniform(0.3, 0.8, size=(2, 16, 16))

    def test_zero_velocity_on_identical_images(self):
        loss = total_loss(self.fixed, self.fixed, np.zeros((2, 16, 16)), None, LossConfig(lcc_window=5))
        self.assertAlmostEqual(loss.item(), -1.0, delta=1e-6)

    def test_without_regularisers_is_negative_correlation(self):
        cfg = LossConfig(lcc_window=5, lambda_smooth=0.0, weight_decay=0.0)
        warped = warp(self.moving, integrate(self.velocity))
        expected = -lcc(self.fixed, warped, window=5).item()
        self.assertAlmostEqual(total_loss(self.moving, self.fixed, self.velocity, None, cfg).item(), expected, places=12)

    def test_smoothness_term(self):
        for regularize in ('velocity', 'deformation'):
            with self.subTest(regularize=regularize):
                plain = LossConfig(lcc_window=5, lambda_smooth=0.0, weight_decay=0.0)
                smoothed = LossConfig(lcc_window=5, lambda_smooth=0.5, weight_decay=0.0, regularize=regularize)
                field = self.velocity if regularize == 'velocity' else integrate(self.velocity)
                difference = (
                    total_loss(self.moving, self.fixed, self.velocity, None, smoothed).item()
                    - total_loss(self.moving, self.fixed, self.velocity, None, plain).item()
                )
                self.assertAlmostEqual(difference, 0.5 * smoothness(field).item(), places=10)

    def test_weight_decay_term(self):
        weights = {'a': Tensor([1.0, 2.0]), 'b': Tensor([[3.0]])}
        self.assertEqual(weight_norm(weights).item(), 14.0)
        self.assertEqual(weight_norm(None).item(), 0.0)

        plain = LossConfig(lcc_window=5, lambda_smooth=0.0, weight_decay=0.0)
        decayed = LossConfig(lcc_window=5, lambda_smooth=0.0, weight_decay=0.5)
        difference = (
            total_loss(self.moving, self.fixed, self.velocity, weights, decayed).item()
            - total_loss(self.moving, self.fixed, self.velocity, weights, plain).item()
        )
        self.assertAlmostEqual(difference, 7.0, places=10)

    def test_velocity_gradient_matches_finite_differences(self):
        cfg = LossConfig(lcc_window=5)
        self.assertGradientsMatch(
            lambda v: total_loss(self.moving, self.fixed, v, None, cfg), [self.velocity], rtol=1e-3, atol=1e-8
        )

    def test_mismatched_velocity_raises(self):
        with self.assertRaises(ShapeError):
            total_loss(self.moving, self.fixed, np.zeros((2, 8, 8)), None)

    def test_config_validation(self):
        for kwargs in ({'lcc_window': 4}, {'lambda_smooth': -1.0}, {'epsilon_var': 0.0}, {'regularize': 'both'}):
            with self.subTest(**kwargs), self.assertRaises(ValueError):
                LossConfig(**kwargs)
