"""
Synthetic registration pairs with known ground-truth deformations, and the
corruptions used to test robustness and uncertainty.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .autodiff import no_grad
from .conf import defaults
from .diffeo import warp
from .exceptions import RegistrationError, ShapeError
from .metrics import fold_percentage, warp_mask
from .volumes import ImagePair

logger = logging.getLogger(__name__)

FAMILIES = ('blobs', 'rings', 'phantom')

# (centre offset, semi-axes) as fractions of the grid, intensity; loosely a head phantom
PHANTOM_ELLIPSES = (
    ((0.0, 0.0), (0.38, 0.30), 0.45),
    ((0.0, 0.0), (0.33, 0.25), 0.70),
    ((-0.10, 0.08), (0.12, 0.06), 1.00),
    ((0.12, -0.08), (0.10, 0.07), 0.25),
    ((0.0, 0.0), (0.05, 0.05), 0.90),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Attributes:
        shape (tuple): Grid size.
        family (str): 'blobs', 'rings' or 'phantom'.
        max_displacement (float): Largest displacement magnitude of Φ*, in voxels.
        smoothness (float | None): Gaussian sigma of the displacement noise; min(shape) / 8 when None.
        labels (int): Number of labelled structures for blobs and rings.
        seed (int): Seeds image and deformation.
    """
    shape: Tuple[int, ...] = (64, 64)
    family: str = 'blobs'
    max_displacement: float = 6.0
    smoothness: Optional[float] = None
    labels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'shape', tuple(int(n) for n in self.shape))
        if len(self.shape) not in (2, 3) or any(n < 8 for n in self.shape):
            raise ShapeError(f"Synthetic volumes need 2 or 3 axes of at least 8 voxels, got {self.shape}.")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}.")
        if self.max_displacement < 0:
            raise ValueError(f"max_displacement must be non-negative, got {self.max_displacement}.")
        if self.labels < 1:
            raise ValueError(f"labels must be positive, got {self.labels}.")

    @property
    def sigma(self) -> float:
        return self.smoothness if self.smoothness is not None else min(self.shape) / 8.0


def _coordinates(shape: Tuple[int, ...]) -> np.ndarray:
    """Voxel coordinates scaled to [-1, 1] per axis, shape `(D, *shape)`."""
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing='ij'))


def _ellipsoid(coords: np.ndarray, centre, radii) -> np.ndarray:
    centre = np.asarray(centre, dtype=np.float64).reshape((-1,) + (1,) * (coords.ndim - 1))
    radii = np.asarray(radii, dtype=np.float64).reshape((-1,) + (1,) * (coords.ndim - 1))
    return (((coords - centre) / radii) ** 2).sum(axis=0) <= 1.0


def _blobs(spec: SyntheticSpec, rng: np.random.Generator, coords: np.ndarray):
    dims = len(spec.shape)
    image = np.zeros(spec.shape)
    masks = {}
    for label in range(1, spec.labels + 1):
        centre = rng.uniform(-0.45, 0.45, size=dims)
        radii = rng.uniform(0.18, 0.35, size=dims)
        region = _ellipsoid(coords, centre, radii)
        image[region] = rng.uniform(0.35, 1.0)
        for other in masks.values():
            other[region] = 0
        masks[label] = region.astype(np.uint8)
    return image, masks


def _rings(spec: SyntheticSpec, rng: np.random.Generator, coords: np.ndarray):
    centre = rng.uniform(-0.1, 0.1, size=len(spec.shape)).reshape((-1,) + (1,) * len(spec.shape))
    radius = np.sqrt(((coords - centre) ** 2).sum(axis=0))
    edges = np.sort(rng.uniform(0.1, 0.8, size=spec.labels + 1))
    image = np.zeros(spec.shape)
    masks = {}
    for label in range(1, spec.labels + 1):
        region = (radius >= edges[label - 1]) & (radius < edges[label])
        image[region] = 0.3 + 0.7 * label / spec.labels
        masks[label] = region.astype(np.uint8)
    return image, masks


def _phantom(spec: SyntheticSpec, rng: np.random.Generator, coords: np.ndarray):
    dims = len(spec.shape)
    image = np.zeros(spec.shape)
    masks = {}
    for label, (offset, axes, intensity) in enumerate(PHANTOM_ELLIPSES, start=1):
        centre = np.zeros(dims)
        centre[-2:] = offset
        centre += rng.normal(0.0, 0.02, size=dims)
        radii = np.full(dims, axes[0])
        radii[-2:] = axes
        radii *= rng.uniform(0.9, 1.1, size=dims)
        region = _ellipsoid(coords, centre, radii)
        image[region] = intensity
        for other in masks.values():
            other[region] = 0
        masks[label] = region.astype(np.uint8)
    return image, masks


RENDERERS = {'blobs': _blobs, 'rings': _rings, 'phantom': _phantom}


def render_image(spec: SyntheticSpec, rng: np.random.Generator):
    """An image in [0, 1] with faint smooth texture, and its label masks."""
    image, masks = RENDERERS[spec.family](spec, rng, _coordinates(spec.shape))
    texture = ndimage.gaussian_filter(rng.normal(size=spec.shape), sigma=1.5)
    texture /= max(np.abs(texture).max(), 1e-12)
    image = ndimage.gaussian_filter(image, sigma=0.7) + 0.05 * texture
    low, high = image.min(), image.max()
    return (image - low) / (high - low), masks


def smooth_displacement(shape: Tuple[int, ...], magnitude: float, sigma: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Gaussian-smoothed white noise scaled so the largest displacement vector has length `magnitude`."""
    dims = len(shape)
    noise = rng.normal(size=(dims,) + tuple(shape))
    field = np.stack([ndimage.gaussian_filter(component, sigma=sigma, mode='reflect') for component in noise])
    norm = np.sqrt((field ** 2).sum(axis=0)).max()
    if norm == 0 or magnitude == 0:
        return np.zeros_like(field)
    return field * (magnitude / norm)


def generate_pair(spec: SyntheticSpec, pair_id: str = 'pair', max_attempts: Optional[int] = None) -> ImagePair:
    """
    Render a moving image and warp it through a random fold-free deformation.

    The fixed image and masks are the moving ones warped through Φ*, so Φ*
    registers moving onto fixed exactly. A deformation with folds is redrawn at
    half the magnitude.

    Raises:
        RegistrationError: If no fold-free deformation is found in `max_attempts` draws.
    """
    max_attempts = max_attempts or defaults('MAX_PAIR_ATTEMPTS')
    rng = np.random.default_rng(spec.seed)
    moving, moving_masks = render_image(spec, rng)

    magnitude = spec.max_displacement
    for attempt in range(1, max_attempts + 1):
        displacement = smooth_displacement(spec.shape, magnitude, spec.sigma, rng)
        folds = fold_percentage(displacement)
        if folds == 0:
            break
        logger.warning(
            "Deformation draw %d for %s folds %.3f%% of voxels; retrying at magnitude %.3g",
            attempt, pair_id, folds, magnitude / 2,
        )
        magnitude /= 2
    else:
        raise RegistrationError(f"No fold-free deformation for {pair_id} after {max_attempts} attempts.")

    with no_grad():
        fixed = warp(moving, displacement).data
    fixed_masks = {label: warp_mask(mask, displacement) for label, mask in moving_masks.items()}
    return ImagePair(
        pair_id=pair_id,
        moving=moving,
        fixed=fixed,
        moving_masks=moving_masks,
        fixed_masks=fixed_masks,
        ground_truth=displacement,
    )


def corrupt_gaussian(image, sigma: float, seed: int = 0) -> np.ndarray:
    """Add N(0, σ²) noise per voxel and clip to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}.")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def corrupt_mixed(image_i, image_j, alpha: float) -> np.ndarray:
    """The convex combination α·I_j + (1 - α)·I_i."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}.")
    image_i = np.asarray(image_i, dtype=np.float64)
    image_j = np.asarray(image_j, dtype=np.float64)
    if image_i.shape != image_j.shape:
        raise ShapeError(f"Cannot mix volumes of shapes {image_i.shape} and {image_j.shape}.")
    return alpha * image_j + (1.0 - alpha) * image_i


def generate_pairs(count: int, spec: SyntheticSpec) -> Dict[str, ImagePair]:
    """`count` pairs drawn with seeds spec.seed, spec.seed + 1, ..."""
    pairs = {}
    for index in range(count):
        pair_id = f'pair-{index:04d}'
        pair_spec = SyntheticSpec(
            shape=spec.shape, family=spec.family, max_displacement=spec.max_displacement,
            smoothness=spec.smoothness, labels=spec.labels, seed=spec.seed + index,
        )
        pairs[pair_id] = generate_pair(pair_spec, pair_id=pair_id)
    return pairs
