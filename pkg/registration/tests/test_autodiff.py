import numpy as np
from django.test import SimpleTestCase

from registration.autodiff import (
    Tape, Tensor, backward, box_sum, clamp_min, concat_channels, conv, current_tape, leaky_relu, no_grad,
    upsample_nearest,
)
from registration.diffeo import sample
from registration.exceptions import ShapeError

from .mixins import GradientCheckMixin


class ConvTests(GradientCheckMixin, SimpleTestCase):
    """
    Tests for the N-dimensional convolution.
    """

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_centred_delta_kernel_is_identity(self):
        """
        Test that a centred delta kernel with zero bias reproduces the input.
        """
        x = self.rng.normal(size=(1, 5, 6))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = conv(Tensor(x), Tensor(kernel), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_computed_one_dimensional_case(self):
        """
        Test [1, 2, 3] convolved with [1, 1, 1] under zero padding.
        """
        out = conv(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones((1, 1, 3))))
        np.testing.assert_array_equal(out.data, [[3.0, 6.0, 5.0]])

    def test_stride_two_halves_extents_with_ceiling(self):
        out = conv(Tensor(self.rng.normal(size=(1, 7, 6))), Tensor(self.rng.normal(size=(4, 1, 3, 3))), stride=2)
        self.assertEqual(out.shape, (4, 4, 3))

    def test_channel_mismatch_raises(self):
        with self.assertRaises(ShapeError):
            conv(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_zero_extent_input_raises(self):
        with self.assertRaises(ShapeError):
            conv(Tensor(np.ones((1, 0, 4))), Tensor(np.ones((1, 1, 3, 3))))

    def test_gradients_match_finite_differences(self):
        """
        Test the input, kernel and bias gradients at stride 1 and stride 2.
        """
        x = self.rng.normal(size=(2, 5, 5))
        kernel = self.rng.normal(size=(3, 2, 3, 3))
        bias = self.rng.normal(size=3)
        for stride in (1, 2):
            projection = self.rng.normal(size=conv(Tensor(x), Tensor(kernel), Tensor(bias), stride=stride).shape)
            self.assertGradientsMatch(
                lambda a, k, b: (conv(a, k, b, stride=stride) * projection).sum(), [x, kernel, bias]
            )


class ElementwiseTests(GradientCheckMixin, SimpleTestCase):
    """
    Tests for activations, resampling and channel concatenation.
    """

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_leaky_relu_values(self):
        out = leaky_relu(Tensor([2.0, -1.0]), 0.2)
        np.testing.assert_allclose(out.data, [2.0, -0.2])

    def test_leaky_relu_gradient_on_negative_side(self):
        """
        Test that the slope is the derivative at x = -1 and matches a finite difference.
        """
        x = Tensor([-1.0], requires_grad=True)
        with Tape() as tape:
            loss = leaky_relu(x, 0.2).sum()
        gradient = tape.backward(loss)[x]
        self.assertAlmostEqual(float(gradient[0]), 0.2, places=12)
        self.assertGradientsMatch(lambda a: leaky_relu(a, 0.2).sum(), [np.array([-1.0])], rtol=1e-6)

    def test_leaky_relu_rejects_slope_outside_unit_interval(self):
        with self.assertRaises(ValueError):
            leaky_relu(Tensor([1.0]), 1.5)

    def test_upsample_nearest(self):
        np.testing.assert_array_equal(upsample_nearest(Tensor([[1.0, 2.0]]), 2).data, [[1.0, 1.0, 2.0, 2.0]])
        x = self.rng.normal(size=(2, 3, 3))
        np.testing.assert_array_equal(upsample_nearest(Tensor(x), 1).data, x)

    def test_upsample_adjoint_sums_replicas(self):
        """
        Test that every input voxel receives factor^D from the gradient of the output sum.
        """
        x = Tensor(self.rng.normal(size=(1, 3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = upsample_nearest(x, 2).sum()
        np.testing.assert_array_equal(tape.backward(loss)[x], np.full((1, 3, 4), 4.0))

    def test_clamp_min_passes_gradient_only_above_the_floor(self):
        x = np.array([0.2, 0.7, 1.4, 2.0])
        np.testing.assert_array_equal(clamp_min(Tensor(x), 1.0).data, [1.0, 1.0, 1.4, 2.0])
        theta = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = (clamp_min(theta, 1.0) ** 2).sum()
        np.testing.assert_allclose(tape.backward(loss)[theta], [0.0, 0.0, 2.8, 4.0], rtol=1e-15)
        self.assertGradientsMatch(lambda a: (clamp_min(a, 1.0) ** 2).sum(), [x])

    def test_concat_shapes(self):
        out = concat_channels(Tensor(np.zeros((16, 8, 8))), Tensor(np.zeros((32, 8, 8))))
        self.assertEqual(out.shape, (48, 8, 8))
        a = self.rng.normal(size=(3, 4, 4))
        np.testing.assert_array_equal(concat_channels(Tensor(a), Tensor(np.zeros((0, 4, 4)))).data, a)

    def test_concat_spatial_mismatch_raises(self):
        with self.assertRaises(ShapeError):
            concat_channels(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 4, 8))))

    def test_concat_backward_splits_gradient(self):
        a = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.zeros((1, 3)), requires_grad=True)
        with Tape() as tape:
            loss = concat_channels(a, b)[2].sum()
        gradients = tape.backward(loss)
        np.testing.assert_array_equal(gradients[a], np.zeros((2, 3)))
        np.testing.assert_array_equal(gradients[b], np.ones((1, 3)))

    def test_arithmetic_and_resampling_gradients(self):
        """
        Test division, powers, indexing, box sums and linear resampling against finite differences.
        """
        a = self.rng.uniform(0.5, 1.5, size=(3, 4))
        b = self.rng.uniform(0.5, 1.5, size=(3, 4))
        self.assertGradientsMatch(lambda x, y: (x / y + x ** 3 - y[1:].sum()).sum(), [a, b])
        self.assertGradientsMatch(lambda x: (box_sum(x, (3, 3)) ** 2).mean(), [a])

        source = self.rng.normal(size=(2, 5, 5))
        signs = self.rng.choice([-1.0, 1.0], size=(2, 5, 5))
        displacement = signs * self.rng.uniform(0.1, 0.4, size=(2, 5, 5))
        projection = self.rng.normal(size=(2, 5, 5))
        self.assertGradientsMatch(lambda s, u: (sample(s, u) * projection).sum(), [source, displacement])


class BackwardTests(SimpleTestCase):
    """
    Tests for the tape replay.
    """

    def setUp(self):
        self.rng = np.random.default_rng(2)

    def test_half_sum_of_squares_gradient_is_identity(self):
        theta = Tensor(self.rng.normal(size=(4, 3)), requires_grad=True)
        with Tape() as tape:
            loss = (theta * theta * 0.5).sum()
        np.testing.assert_allclose(tape.backward(loss)[theta], theta.data, rtol=1e-15)

    def test_constant_loss_has_zero_gradient(self):
        theta = Tensor(self.rng.normal(size=5), requires_grad=True)
        with Tape() as tape:
            loss = (theta * 0.0).sum() + 3.0
        np.testing.assert_array_equal(tape.backward(loss)[theta], np.zeros(5))

    def test_non_scalar_loss_raises(self):
        theta = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = theta * 2.0
        with self.assertRaises(ShapeError):
            tape.backward(out)

    def test_backward_is_linear(self):
        """
        Test grad(a*L1 + b*L2) = a*grad(L1) + b*grad(L2).
        """
        data = self.rng.normal(size=(3, 6, 6))
        kernel = self.rng.normal(size=(2, 3, 3, 3))

        def losses(x):
            y = conv(x, Tensor(kernel))
            return (y * y).mean(), leaky_relu(y, 0.2).sum()

        grads = []
        for a, b in ((1.0, 0.0), (0.0, 1.0), (2.5, -0.7)):
            x = Tensor(data, requires_grad=True)
            with Tape() as tape:
                first, second = losses(x)
                loss = first * a + second * b
            grads.append(tape.backward(loss)[x])
        np.testing.assert_allclose(grads[2], 2.5 * grads[0] - 0.7 * grads[1], atol=1e-10)

    def test_no_grad_records_nothing(self):
        theta = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                out = (theta * 2.0).sum()
        self.assertEqual(len(tape), 0)
        self.assertFalse(out.requires_grad)

    def test_nothing_is_recorded_outside_a_tape(self):
        theta = Tensor(np.ones(3), requires_grad=True)
        for _ in range(10):
            out = (theta * 2.0).sum()
        self.assertIsNone(current_tape())
        self.assertFalse(out.requires_grad)
        with self.assertRaises(RuntimeError):
            backward(out)

    def test_nested_tapes_record_into_the_innermost(self):
        theta = Tensor(np.ones(3), requires_grad=True)
        with Tape() as outer:
            (theta * 2.0).sum()
            with Tape() as inner:
                (theta * 3.0).sum()
            self.assertIs(current_tape(), outer)
        self.assertEqual((len(outer), len(inner)), (2, 2))
        self.assertIsNone(current_tape())

    def test_repeated_passes_are_bitwise_identical(self):
        data = self.rng.normal(size=(2, 8, 8))
        kernel = self.rng.normal(size=(3, 2, 3, 3))
        results = []
        for _ in range(2):
            x = Tensor(data, requires_grad=True)
            with Tape() as tape:
                loss = (leaky_relu(conv(x, Tensor(kernel), stride=2), 0.2) ** 2).sum()
            results.append((loss.item(), backward(loss, tape)[x]))
        self.assertEqual(results[0][0], results[1][0])
        np.testing.assert_array_equal(results[0][1], results[1][1])
