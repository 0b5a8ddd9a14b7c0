"""
Stationary velocity fields, scaling-and-squaring exponentiation and warping.

Fields use the displacement convention: a deformation is stored as `u` with
`Phi(p) = p + u(p)`, shape `(D, *spatial)`, in voxel units. Component `d`
displaces along spatial axis `d`. Sample coordinates outside the grid are
clamped to it (border replication).
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .autodiff import Function, Tensor, as_tensor
from .exceptions import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IntegrationConfig:
    """Number of squaring steps T used to exponentiate a velocity field."""

    steps: int = 6

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"Integration needs at least one step, got {self.steps}.")


def identity_grid(shape: Tuple[int, ...], dtype=np.float64) -> np.ndarray:
    """Voxel coordinates of a grid, shape `(D, *shape)`."""
    axes = [np.arange(n, dtype=dtype) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=0)


def translation(shape: Tuple[int, ...], offset, dtype=np.float64) -> np.ndarray:
    """Constant displacement field moving every voxel by `offset` voxels."""
    offset = np.asarray(offset, dtype=dtype).reshape((-1,) + (1,) * len(shape))
    if offset.shape[0] != len(shape):
        raise ShapeError(f"Offset has {offset.shape[0]} components for a {len(shape)}-D grid.")
    return np.broadcast_to(offset, (len(shape),) + tuple(shape)).copy()


class LinearSample(Function):
    """
    D-linear interpolation of a `(C, *S)` source at `p + u(p)` for a `(D, *S)`
    displacement `u`, differentiable with respect to both the source and `u`.
    """

    def forward(self, source, displacement):
        spatial = source.shape[1:]
        dims = len(spatial)
        if displacement.shape != (dims,) + spatial:
            raise ShapeError(
                f"Displacement of shape {displacement.shape} does not match a source grid {spatial}."
            )

        coords = identity_grid(spatial, dtype=displacement.dtype) + displacement
        upper = np.array(spatial, dtype=displacement.dtype).reshape((-1,) + (1,) * dims) - 1
        inside = (coords >= 0) & (coords <= upper)
        coords = np.clip(coords, 0, upper)
        lower = np.floor(coords)
        lower = np.minimum(lower, np.maximum(upper - 1, 0)).astype(np.intp)
        frac = coords - lower.astype(coords.dtype)
        high = np.minimum(lower + 1, upper.astype(np.intp))

        corners = []
        out = np.zeros((source.shape[0],) + spatial, dtype=np.result_type(source, displacement))
        for bits in np.ndindex(*([2] * dims)):
            index = tuple(high[d] if bit else lower[d] for d, bit in enumerate(bits))
            factors = [frac[d] if bit else 1.0 - frac[d] for d, bit in enumerate(bits)]
            weight = np.prod(factors, axis=0) if dims > 1 else factors[0]
            values = source[(slice(None),) + index]
            out += weight * values
            corners.append((bits, index, factors, weight, values))

        self.source_shape = source.shape
        self.inside = inside
        self.corners = corners
        return out

    def backward(self, grad):
        dims = len(self.source_shape) - 1
        grad_source = np.zeros(self.source_shape, dtype=grad.dtype)
        grad_disp = np.zeros((dims,) + self.source_shape[1:], dtype=grad.dtype)
        flat_source = grad_source.reshape(self.source_shape[0], -1)

        for bits, index, factors, weight, values in self.corners:
            flat_index = np.ravel_multi_index(index, self.source_shape[1:]).reshape(-1)
            contribution = (grad * weight).reshape(self.source_shape[0], -1)
            for channel in range(self.source_shape[0]):
                np.add.at(flat_source[channel], flat_index, contribution[channel])

            along = (grad * values).sum(axis=0)
            for d in range(dims):
                others = [factors[e] for e in range(dims) if e != d]
                partial = np.prod(others, axis=0) if others else 1.0
                sign = 1.0 if bits[d] else -1.0
                grad_disp[d] += sign * partial * along

        grad_disp *= self.inside
        return grad_source, grad_disp


def sample(source, displacement) -> Tensor:
    """Resample a channel-first array at `p + displacement(p)`."""
    return LinearSample.apply(source, displacement)


def compose(first, second) -> Tensor:
    """
    Displacement of `first ∘ second`, i.e. `p -> first(second(p))`.

    `first`'s displacement is linearly interpolated at `second(p)`.
    """
    first, second = as_tensor(first), as_tensor(second)
    if first.shape != second.shape:
        raise ShapeError(f"Cannot compose fields of shapes {first.shape} and {second.shape}.")
    return second + sample(first, second)


def integrate(velocity, steps: int = 6) -> Tensor:
    """
    Exponentiate a stationary velocity field by scaling and squaring.

    The field is scaled by 2^-steps, taken as the displacement of the first-order
    small deformation, then composed with itself `steps` times.

    Args:
        velocity (Tensor | np.ndarray): Velocity field `(D, *S)` in voxels.
        steps (int): Number of squarings T.

    Returns:
        Tensor: Displacement field of the time-1 flow.
    """
    if steps < 1:
        raise ValueError(f"Integration needs at least one step, got {steps}.")
    velocity = as_tensor(velocity)
    displacement = velocity * (1.0 / 2 ** steps)
    for _ in range(steps):
        displacement = compose(displacement, displacement)
    return displacement


def warp(image, displacement) -> Tensor:
    """
    Resample a scalar volume through a deformation by D-linear interpolation.

    Args:
        image (Tensor | np.ndarray): Volume of shape `S`.
        displacement (Tensor | np.ndarray): Deformation `(D, *S)`.

    Returns:
        Tensor: The warped volume, shape `S`.
    """
    image = as_tensor(image)
    return sample(image.reshape((1,) + image.shape), displacement).reshape(image.shape)
