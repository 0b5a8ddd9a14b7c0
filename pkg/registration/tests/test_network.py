import numpy as np
from django.test import SimpleTestCase

from registration.autodiff import Tape
from registration.exceptions import ShapeError
from registration.losses import LossConfig, total_loss
from registration.network import Backbone, BackboneConfig, WeightSet, forward, init_weights, layer_specs

from .mixins import GradientCheckMixin, TinyBackboneMixin


class BackboneConfigTests(SimpleTestCase):
    """
    Tests for BackboneConfig validation and the parameter budget.
    """

    def test_three_dimensional_default_parameter_count(self):
        """
        Test that the 3-D default backbone has 265,237 trainable parameters.
        """
        backbone = Backbone(BackboneConfig(spatial_dims=3))
        self.assertEqual(backbone.parameter_count(), 265237)
        self.assertEqual(sum(count for _, _, count in backbone.layer_breakdown()), 265237)

    def test_layer_layout(self):
        """
        Test layer names, strides and the skip-connection input widths of the default layout.
        """
        specs = {spec.name: spec for spec in layer_specs(BackboneConfig(spatial_dims=3))}
        self.assertEqual(
            list(specs), ['enc0', 'enc1', 'enc2', 'enc3', 'enc4', 'dec0', 'dec1', 'dec2', 'dec3', 'flow']
        )
        self.assertEqual([specs[f'enc{i}'].stride for i in range(5)], [2, 2, 2, 2, 1])
        self.assertEqual([specs[f'dec{i}'].in_channels for i in range(4)], [64, 64, 48, 32])
        self.assertEqual((specs['flow'].in_channels, specs['flow'].out_channels), (18, 3))

    def test_invalid_configurations_raise(self):
        for kwargs in (
            {'spatial_dims': 4},
            {'kernel_size': 4},
            {'leaky_slope': 1.0},
            {'encoder_channels': (16,)},
            {'encoder_channels': (16, 32, 32, 32, 32), 'decoder_channels': (32, 32)},
        ):
            with self.subTest(**kwargs), self.assertRaises(ValueError):
                BackboneConfig(**kwargs)

    def test_dict_round_trip_ignores_output_channels(self):
        config = BackboneConfig(spatial_dims=3, decoder_channels=(32, 32, 32, 8))
        data = config.to_dict()
        data['output_channels'] = 3
        self.assertEqual(BackboneConfig.from_dict(data), config)


class ForwardTests(TinyBackboneMixin, GradientCheckMixin, SimpleTestCase):
    """
    Tests for the velocity-field forward pass.
    """

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.config = BackboneConfig()
        self.moving = self.rng.random((64, 64))
        self.fixed = self.rng.random((64, 64))

    def test_default_two_dimensional_output_shape(self):
        velocity = forward(self.moving, self.fixed, init_weights(self.config, seed=0), self.config)
        self.assertEqual(velocity.shape, (2, 64, 64))
        self.assertTrue(np.all(np.isfinite(velocity.data)))

    def test_zero_weights_give_zero_velocity(self):
        weights = init_weights(self.config, seed=0)
        zeros = weights.replace([np.zeros_like(array) for array in weights.arrays()])
        velocity = forward(self.moving, self.fixed, zeros, self.config)
        np.testing.assert_array_equal(velocity.data, np.zeros((2, 64, 64)))

    def test_initialisation_is_seeded(self):
        self.assertTrue(init_weights(self.config, 3).equals(init_weights(self.config, 3)))
        self.assertFalse(init_weights(self.config, 3).equals(init_weights(self.config, 4)))

    def test_fresh_weights_predict_near_identity(self):
        """
        Test that backbones freshly initialised under 100 seeds predict velocities below half a voxel.
        """
        moving, fixed = self.moving[:32, :32], self.fixed[:32, :32]
        for seed in range(100):
            velocity = forward(moving, fixed, init_weights(self.config, seed), self.config)
            self.assertLess(np.abs(velocity.data).max(), 0.5)

    def test_swapping_the_pair_changes_the_output(self):
        weights = init_weights(self.config, seed=1)
        forward_pass = forward(self.moving, self.fixed, weights, self.config).data
        swapped = forward(self.fixed, self.moving, weights, self.config).data
        self.assertFalse(np.array_equal(forward_pass, swapped))

    def test_indivisible_shape_raises_with_padding_hint(self):
        with self.assertRaisesMessage(ShapeError, '(32, 48)'):
            forward(self.moving[:30, :40], self.fixed[:30, :40], init_weights(self.config, 0), self.config)

    def test_mismatched_pair_raises(self):
        with self.assertRaises(ShapeError):
            forward(self.moving, self.fixed[:32], init_weights(self.config, 0), self.config)

    def test_float32_weights_give_float32_velocity(self):
        weights = init_weights(self.config, seed=0, dtype=np.float32)
        self.assertEqual(forward(self.moving, self.fixed, weights, self.config).dtype, np.float32)

    def test_network_loss_gradient_matches_finite_differences(self):
        """
        Test the end-to-end gradient of the training loss on a sample of parameters.
        """
        backbone = Backbone(self.backbone_config)
        weights = backbone.init_weights(seed=2)
        moving = self.rng.random((16, 16))
        fixed = self.rng.random((16, 16))
        cfg = LossConfig(lcc_window=5)

        def loss_for(values: WeightSet):
            params = values.as_tensors(requires_grad=True)
            with Tape() as tape:
                velocity = backbone.forward(moving, fixed, params)
                loss = total_loss(moving, fixed, velocity, params, cfg)
            return loss, tape, params

        loss, tape, params = loss_for(weights)
        gradients = tape.backward(loss)

        eps = 1e-6
        for name in ('enc0.kernel', 'enc1.bias', 'dec0.kernel', 'flow.kernel', 'flow.bias'):
            flat = weights[name].reshape(-1)
            for position in self.rng.choice(flat.size, size=min(6, flat.size), replace=False):
                shifted = []
                for delta in (eps, -eps):
                    perturbed = weights.copy()
                    perturbed[name].reshape(-1)[position] += delta
                    shifted.append(loss_for(perturbed)[0].item())
                numeric = (shifted[0] - shifted[1]) / (2 * eps)
                analytic = gradients[params[name]].reshape(-1)[position]
                self.assertLess(abs(analytic - numeric), 1e-3 * max(abs(numeric), 1e-4))
