"""
Registration objective: -LCC(fixed, moving ∘ Φ) + λ·smoothness + weight decay.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Union

import numpy as np

from .autodiff import Tensor, as_tensor, box_sum, clamp_min
from .diffeo import integrate, warp
from .exceptions import ShapeError
from .network import WeightSet

logger = logging.getLogger(__name__)

REGULARIZE_CHOICES = ('velocity', 'deformation')


@dataclass(frozen=True)
class LossConfig:
    """
    Attributes:
        lcc_window (int): Odd window extent per dimension for local cross-correlation.
        lambda_smooth (float): Weight λ of the gradient smoothness term.
        weight_decay (float): Weight of ‖θ‖².
        epsilon_var (float): Guard added to the product of local variances.
        regularize (str): 'velocity' to smooth V, 'deformation' to smooth Φ.
    """
    lcc_window: int = 9
    lambda_smooth: float = 0.1
    weight_decay: float = 1e-7
    epsilon_var: float = 1e-5
    regularize: str = 'velocity'

    def __post_init__(self):
        if self.lcc_window < 1 or self.lcc_window % 2 == 0:
            raise ValueError(f"lcc_window must be a positive odd integer, got {self.lcc_window}.")
        if self.lambda_smooth < 0 or self.weight_decay < 0:
            raise ValueError("Loss weights must be non-negative.")
        if self.epsilon_var <= 0:
            raise ValueError(f"epsilon_var must be positive, got {self.epsilon_var}.")
        if self.regularize not in REGULARIZE_CHOICES:
            raise ValueError(f"regularize must be one of {REGULARIZE_CHOICES}, got {self.regularize!r}.")

    def to_dict(self) -> dict:
        return asdict(self)


def lcc(a, b, window: int = 9, epsilon_var: float = 1e-5) -> Tensor:
    """
    Mean squared local normalised cross-correlation of two volumes.

    Window statistics are normalised by the number of in-grid voxels of each
    window, so border windows behave like interior ones.

    Args:
        a, b (Tensor | np.ndarray): Volumes of equal shape.
        window (int): Odd window extent along every axis.
        epsilon_var (float): Floor on the variance product. Windows whose product
            clears it correlate exactly; flatter windows score below 1.

    Returns:
        Tensor: Scalar in [0, 1].

    Raises:
        ShapeError: If the shapes differ or the window exceeds the volume.
    """
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"Cannot correlate volumes of shapes {a.shape} and {b.shape}.")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"LCC window must be a positive odd integer, got {window}.")
    if any(window > n for n in a.shape):
        raise ShapeError(f"LCC window {window} is larger than the volume {a.shape}.")

    extent = (window,) * a.ndim
    counts = box_sum(np.ones(a.shape, dtype=a.dtype), extent).data

    sum_a = box_sum(a, extent)
    sum_b = box_sum(b, extent)
    cross = box_sum(a * b, extent) - sum_a * sum_b / counts
    var_a = box_sum(a * a, extent) - sum_a * sum_a / counts
    var_b = box_sum(b * b, extent) - sum_b * sum_b / counts

    cc = cross * cross / clamp_min(var_a * var_b, epsilon_var)
    return cc.mean()


def smoothness(field) -> Tensor:
    """
    Mean squared forward difference of a `(D, *S)` field, averaged over the D directions.
    """
    field = as_tensor(field)
    dims = field.ndim - 1
    if dims < 1:
        raise ShapeError(f"Expected a channel-first vector field, got shape {field.shape}.")

    total = None
    for axis in range(1, field.ndim):
        if field.shape[axis] < 2:
            continue
        ahead = [slice(None)] * field.ndim
        behind = [slice(None)] * field.ndim
        ahead[axis] = slice(1, None)
        behind[axis] = slice(None, -1)
        diff = field[tuple(ahead)] - field[tuple(behind)]
        term = (diff * diff).mean()
        total = term if total is None else total + term

    if total is None:
        return Tensor(0.0, dtype=field.dtype)
    return total * (1.0 / dims)


def weight_norm(weights: Optional[Union[WeightSet, Mapping[str, Tensor]]]) -> Tensor:
    """‖θ‖² over every kernel and bias."""
    if weights is None:
        return Tensor(0.0)
    tensors = weights.as_tensors() if isinstance(weights, WeightSet) else weights
    total = None
    for tensor in tensors.values():
        term = (tensor * tensor).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(moving, fixed, velocity, weights, cfg: LossConfig = None, steps: int = 6) -> Tensor:
    """
    The training objective for one pair, differentiable through integration and warping.

    Args:
        moving, fixed (Tensor | np.ndarray): Volumes of shape S.
        velocity (Tensor): Predicted velocity field `(D, *S)`.
        weights (WeightSet | dict[str, Tensor] | None): Parameters for the decay term.
        cfg (LossConfig): Loss hyperparameters.
        steps (int): Squaring steps used to integrate the velocity.

    Returns:
        Tensor: Scalar loss.
    """
    cfg = cfg or LossConfig()
    velocity = as_tensor(velocity)
    moving = as_tensor(moving, dtype=velocity.dtype)
    fixed = as_tensor(fixed, dtype=velocity.dtype)
    if velocity.shape[1:] != fixed.shape:
        raise ShapeError(f"Velocity field {velocity.shape} does not cover a volume of shape {fixed.shape}.")

    deformation = integrate(velocity, steps)
    warped = warp(moving, deformation)
    loss = -lcc(fixed, warped, cfg.lcc_window, cfg.epsilon_var)

    if cfg.lambda_smooth:
        regularized = velocity if cfg.regularize == 'velocity' else deformation
        loss = loss + cfg.lambda_smooth * smoothness(regularized)
    if cfg.weight_decay and weights is not None:
        loss = loss + cfg.weight_decay * weight_norm(weights)
    return loss
