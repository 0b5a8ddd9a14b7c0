"""
UNet-style backbone mapping an image pair to a stationary velocity field.

Layout for the default configuration (D spatial dims, k = 3):

    enc0..enc3   stride-2 convolutions   2 -> 16 -> 32 -> 32 -> 32
    enc4         stride-1 bottleneck     32 -> 32
    dec0..dec2   upsample x2, concatenate the encoder output at that scale, convolve to 32
    dec3         convolution             32 -> 16
    flow         upsample x2, concatenate the input pair, convolve 18 -> D (no activation)

Every convolution except `flow` is followed by a leaky ReLU.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Mapping, NamedTuple, Tuple, Union

import numpy as np

from .autodiff import Tensor, as_tensor, concat_channels, conv, leaky_relu, upsample_nearest
from .exceptions import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    """
    Architecture of the velocity-field predictor.

    Attributes:
        spatial_dims (int): 2 or 3.
        encoder_channels (tuple): Stride-2 convolutions followed by one stride-1 bottleneck.
        decoder_channels (tuple): Upsample+skip convolutions (one per encoder scale below
            the coarsest, i.e. len(encoder) - 2 of them) followed by full-rate convolutions.
        leaky_slope (float): Negative slope of the activations.
        kernel_size (int): Kernel extent along every spatial axis.
        flow_init_std (float): Standard deviation of the initial flow-layer kernel.
    """
    spatial_dims: int = 2
    encoder_channels: Tuple[int, ...] = (16, 32, 32, 32, 32)
    decoder_channels: Tuple[int, ...] = (32, 32, 32, 16)
    leaky_slope: float = 0.2
    kernel_size: int = 3
    flow_init_std: float = 1e-5
    input_channels: int = field(default=2, init=False)

    def __post_init__(self):
        object.__setattr__(self, 'encoder_channels', tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, 'decoder_channels', tuple(int(c) for c in self.decoder_channels))
        if self.spatial_dims not in (2, 3):
            raise ValueError(f"spatial_dims must be 2 or 3, got {self.spatial_dims}.")
        if len(self.encoder_channels) < 2:
            raise ValueError("The encoder needs at least one downsampling layer and a bottleneck.")
        if len(self.decoder_channels) < max(len(self.encoder_channels) - 2, 1):
            raise ValueError(
                f"{len(self.encoder_channels)} encoder layers need at least "
                f"{max(len(self.encoder_channels) - 2, 1)} decoder layers."
            )
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("Channel counts must be positive.")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}.")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}.")

    @property
    def output_channels(self) -> int:
        return self.spatial_dims

    @property
    def downsampling_factor(self) -> int:
        return 2 ** (len(self.encoder_channels) - 1)

    @property
    def skip_stages(self) -> int:
        return max(len(self.encoder_channels) - 2, 0)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop('input_channels')
        data['encoder_channels'] = list(self.encoder_channels)
        data['decoder_channels'] = list(self.decoder_channels)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> 'BackboneConfig':
        return cls(**{key: value for key, value in data.items() if key != 'output_channels'})


class LayerSpec(NamedTuple):
    name: str
    in_channels: int
    out_channels: int
    stride: int


def layer_specs(config: BackboneConfig) -> List[LayerSpec]:
    """The convolution layers of a configuration, in forward order."""
    specs = []
    previous = config.input_channels
    last = len(config.encoder_channels) - 1
    for index, channels in enumerate(config.encoder_channels):
        specs.append(LayerSpec(f'enc{index}', previous, channels, 2 if index < last else 1))
        previous = channels
    for index, channels in enumerate(config.decoder_channels):
        incoming = previous
        if index < config.skip_stages:
            incoming += config.encoder_channels[last - 2 - index]
        specs.append(LayerSpec(f'dec{index}', incoming, channels, 1))
        previous = channels
    specs.append(LayerSpec('flow', previous + config.input_channels, config.output_channels, 1))
    return specs


class WeightSet:
    """
    Ordered collection of named kernel and bias arrays (θ).

    Names follow `<layer>.kernel` / `<layer>.bias`. Iteration order is the
    forward order of the layers, which also fixes the order of noise draws.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: Dict[str, np.ndarray] = {name: np.asarray(value) for name, value in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"WeightSet({len(self)} tensors, {self.parameter_count} parameters)"

    @property
    def names(self) -> List[str]:
        return list(self._arrays)

    @property
    def dtype(self):
        return next(iter(self._arrays.values())).dtype

    @property
    def parameter_count(self) -> int:
        return int(sum(array.size for array in self._arrays.values()))

    def items(self):
        return self._arrays.items()

    def arrays(self) -> List[np.ndarray]:
        return list(self._arrays.values())

    def copy(self) -> 'WeightSet':
        return WeightSet({name: array.copy() for name, array in self._arrays.items()})

    def astype(self, dtype) -> 'WeightSet':
        return WeightSet({name: array.astype(dtype) for name, array in self._arrays.items()})

    def replace(self, arrays: List[np.ndarray]) -> 'WeightSet':
        """A new set with the same names and the given arrays, in order."""
        if len(arrays) != len(self):
            raise ShapeError(f"Expected {len(self)} arrays, got {len(arrays)}.")
        return WeightSet(dict(zip(self._arrays, arrays)))

    def as_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {
            name: Tensor(array, requires_grad=requires_grad, name=name)
            for name, array in self._arrays.items()
        }

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(array)) for array in self._arrays.values())

    def equals(self, other: 'WeightSet') -> bool:
        return self.names == other.names and all(
            np.array_equal(self[name], other[name]) for name in self.names
        )


Weights = Union[WeightSet, Mapping[str, Tensor]]


class Backbone:
    """
    The velocity-field predictor f_θ(I_M, I_F) for one architecture.
    """

    def __init__(self, config: BackboneConfig = None):
        self.config = config or BackboneConfig()
        self.layers = layer_specs(self.config)

    def kernel_shape(self, layer: LayerSpec) -> Tuple[int, ...]:
        spatial = (self.config.kernel_size,) * self.config.spatial_dims
        return (layer.out_channels, layer.in_channels) + spatial

    def layer_breakdown(self) -> List[Tuple[str, Tuple[int, ...], int]]:
        """(layer name, kernel shape, parameter count incl. bias) for every layer."""
        breakdown = []
        for layer in self.layers:
            shape = self.kernel_shape(layer)
            breakdown.append((layer.name, shape, int(np.prod(shape)) + layer.out_channels))
        return breakdown

    def parameter_count(self) -> int:
        return sum(count for _, _, count in self.layer_breakdown())

    def init_weights(self, seed: int, dtype=np.float64) -> WeightSet:
        """
        He-normal kernels for the leaky-ReLU layers, zero biases, and a flow layer
        drawn with `flow_init_std` so the initial deformation is close to identity.
        """
        rng = np.random.default_rng(seed)
        arrays = {}
        slope = self.config.leaky_slope
        for layer in self.layers:
            shape = self.kernel_shape(layer)
            if layer.name == 'flow':
                std = self.config.flow_init_std
            else:
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
            arrays[f'{layer.name}.kernel'] = rng.normal(0.0, std, size=shape).astype(dtype)
            arrays[f'{layer.name}.bias'] = np.zeros(layer.out_channels, dtype=dtype)
        return WeightSet(arrays)

    def check_input(self, shape: Tuple[int, ...]) -> None:
        if len(shape) != self.config.spatial_dims:
            raise ShapeError(
                f"Expected a {self.config.spatial_dims}-D volume, got shape {tuple(shape)}."
            )
        factor = self.config.downsampling_factor
        if any(n % factor for n in shape):
            padded = tuple(-(-n // factor) * factor for n in shape)
            raise ShapeError(
                f"Volume shape {tuple(shape)} is not divisible by {factor}; "
                f"zero-pad it to {padded} (see preprocess)."
            )

    def forward(self, moving, fixed, weights: Weights) -> Tensor:
        """
        Predict the velocity field for a (moving, fixed) pair.

        Args:
            moving (Tensor | np.ndarray): Moving volume, shape S.
            fixed (Tensor | np.ndarray): Fixed volume, shape S.
            weights (WeightSet | dict[str, Tensor]): Parameters; pass tensors that
                require gradients to train through the forward pass.

        Returns:
            Tensor: Velocity field of shape `(D, *S)`.

        Raises:
            ShapeError: On mismatched or indivisible shapes.
        """
        params = weights.as_tensors() if isinstance(weights, WeightSet) else weights
        dtype = next(iter(params.values())).dtype
        moving = as_tensor(moving, dtype=dtype)
        fixed = as_tensor(fixed, dtype=dtype)
        if moving.shape != fixed.shape:
            raise ShapeError(f"Moving {moving.shape} and fixed {fixed.shape} volumes differ in shape.")
        self.check_input(moving.shape)

        pair = concat_channels(moving.reshape((1,) + moving.shape), fixed.reshape((1,) + fixed.shape))
        slope = self.config.leaky_slope
        encoder_depth = len(self.config.encoder_channels)

        h = pair
        scales = []
        for layer in self.layers[:encoder_depth]:
            h = leaky_relu(self._conv(h, layer, params), slope)
            scales.append(h)

        for index, layer in enumerate(self.layers[encoder_depth:-1]):
            if index < self.config.skip_stages:
                h = upsample_nearest(h, 2)
                h = concat_channels(h, scales[encoder_depth - 3 - index])
            h = leaky_relu(self._conv(h, layer, params), slope)

        h = upsample_nearest(h, moving.shape[0] // h.shape[1])
        h = concat_channels(h, pair)
        return self._conv(h, self.layers[-1], params)

    @staticmethod
    def _conv(h: Tensor, layer: LayerSpec, params: Mapping[str, Tensor]) -> Tensor:
        return conv(h, params[f'{layer.name}.kernel'], params[f'{layer.name}.bias'], stride=layer.stride)


def init_weights(config: BackboneConfig, seed: int, dtype=np.float64) -> WeightSet:
    return Backbone(config).init_weights(seed, dtype=dtype)


def forward(moving, fixed, weights: Weights, config: BackboneConfig = None) -> Tensor:
    return Backbone(config).forward(moving, fixed, weights)
