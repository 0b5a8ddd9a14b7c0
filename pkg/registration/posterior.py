"""
Posterior predictive over weight snapshots: the weighted-mean velocity, its
voxel-wise variance and the uncertainty maps derived from them.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .checkpoints import load_checkpoint, read_store_manifest, save_checkpoint, write_store_manifest
from .diffeo import IntegrationConfig, integrate, warp
from .exceptions import FormatError, RegistrationError, ShapeError
from .losses import LossConfig
from .network import Backbone, BackboneConfig, WeightSet

logger = logging.getLogger(__name__)

WEIGHTING_CHOICES = ('negative_loss', 'softmax')


@dataclass(frozen=True)
class PosteriorConfig:
    """
    Attributes:
        weighting (str): 'negative_loss' gives w = max(-L, weight_floor); 'softmax' gives softmax(-L).
        weight_floor (float): Lower bound on negative-loss weights.
        uncertainty_floor (float): Variances below this are raised to it before taking the log.
        entropy_correct (bool): Use ½·log(2πeΣ) instead of ½·log(2πΣ).
    """
    weighting: str = 'negative_loss'
    weight_floor: float = 1e-8
    uncertainty_floor: float = 1e-12
    entropy_correct: bool = False

    def __post_init__(self):
        if self.weighting not in WEIGHTING_CHOICES:
            raise ValueError(f"weighting must be one of {WEIGHTING_CHOICES}, got {self.weighting!r}.")
        if self.weight_floor <= 0 or self.uncertainty_floor <= 0:
            raise ValueError("Posterior floors must be positive.")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WeightSnapshot:
    iteration: int
    weights: WeightSet
    validation_loss: float

    @property
    def file_name(self) -> str:
        return f'snapshot-{self.iteration:06d}.ckpt'


def posterior_weights(losses: Sequence[float], config: PosteriorConfig = None) -> np.ndarray:
    """Unnormalised snapshot weights from validation losses; lower loss gives a larger weight."""
    config = config or PosteriorConfig()
    losses = np.asarray(losses, dtype=np.float64)
    if config.weighting == 'softmax':
        logits = -losses
        exp = np.exp(logits - logits.max())
        return exp / exp.sum()
    return np.maximum(-losses, config.weight_floor)


class SnapshotStore:
    """
    The post-burn-in weight snapshots of one training run, with everything
    needed to use them for registration.
    """

    def __init__(self, snapshots: Sequence[WeightSnapshot], backbone_config: BackboneConfig,
                 integration: IntegrationConfig = None, loss_config: LossConfig = None,
                 posterior_config: PosteriorConfig = None):
        if not snapshots:
            raise RegistrationError("A snapshot store needs at least one snapshot.")
        self.snapshots: List[WeightSnapshot] = list(snapshots)
        self.backbone_config = backbone_config
        self.integration = integration or IntegrationConfig()
        self.loss_config = loss_config or LossConfig()
        self.posterior_config = posterior_config or PosteriorConfig()

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[WeightSnapshot]:
        return iter(self.snapshots)

    @property
    def backbone(self) -> Backbone:
        return Backbone(self.backbone_config)

    @property
    def validation_losses(self) -> np.ndarray:
        return np.array([snapshot.validation_loss for snapshot in self.snapshots], dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return posterior_weights(self.validation_losses, self.posterior_config)

    @property
    def iterations(self) -> List[int]:
        return [snapshot.iteration for snapshot in self.snapshots]

    def save(self, directory) -> Path:
        """Write one checkpoint per snapshot plus `manifest.yaml` into `directory`."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for snapshot, weight in zip(self.snapshots, self.weights):
            save_checkpoint(directory / snapshot.file_name, snapshot.weights, self.backbone_config)
            entries.append({
                'iteration': int(snapshot.iteration),
                'validation_loss': float(snapshot.validation_loss),
                'weight': float(weight),
                'file': snapshot.file_name,
            })
        manifest = {
            'format_version': 1,
            'backbone': self.backbone_config.to_dict(),
            'integration_steps': self.integration.steps,
            'loss': self.loss_config.to_dict(),
            'posterior': self.posterior_config.to_dict(),
            'snapshots': entries,
        }
        write_store_manifest(directory, manifest)
        logger.info("Saved %d snapshots to %s", len(self), directory)
        return directory

    @classmethod
    def load(cls, directory) -> 'SnapshotStore':
        directory = Path(directory)
        manifest = read_store_manifest(directory)
        try:
            backbone_config = BackboneConfig.from_dict(manifest['backbone'])
            loss_config = LossConfig(**manifest['loss'])
            posterior_config = PosteriorConfig(**manifest['posterior'])
            integration = IntegrationConfig(steps=manifest['integration_steps'])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"Snapshot manifest in {directory} holds an invalid configuration: {exc}") from exc

        snapshots = []
        for entry in manifest['snapshots']:
            weights, config = load_checkpoint(directory / entry['file'])
            if config != backbone_config:
                raise FormatError(f"Checkpoint {entry['file']} was written for a different backbone.")
            snapshots.append(WeightSnapshot(entry['iteration'], weights, entry['validation_loss']))
        return cls(snapshots, backbone_config, integration, loss_config, posterior_config)


@dataclass
class PosteriorSummary:
    mean_velocity: np.ndarray
    variance: np.ndarray
    uncertainty: np.ndarray
    deformation_uncertainty: Optional[np.ndarray] = None


@dataclass
class RegistrationResult:
    registered: np.ndarray
    deformation: np.ndarray
    summary: PosteriorSummary
    velocities: List[np.ndarray]


def sample_velocities(moving, fixed, store: SnapshotStore) -> List[np.ndarray]:
    """One velocity field per snapshot, in store order."""
    moving = np.asarray(moving)
    fixed = np.asarray(fixed)
    if moving.shape != fixed.shape:
        raise ShapeError(f"Moving {moving.shape} and fixed {fixed.shape} volumes differ in shape.")
    backbone = store.backbone
    with no_grad():
        return [backbone.forward(moving, fixed, snapshot.weights).data for snapshot in store]


def _normalised(weights: Sequence[float], count: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (count,):
        raise ValueError(f"Expected {count} weights, got shape {weights.shape}.")
    if np.any(weights < 0):
        raise ValueError("Posterior weights must be non-negative.")
    total = weights.sum()
    if total <= 0:
        raise ValueError("Posterior weights sum to zero.")
    return weights / total


def weighted_mean(fields: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in fields])
    return np.tensordot(_normalised(weights, len(stack)), stack, axes=1)


def variance(fields: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted per-voxel, per-component variance about the weighted mean."""
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in fields])
    w = _normalised(weights, len(stack))
    deviation = stack - np.tensordot(w, stack, axes=1)
    return np.tensordot(w, deviation * deviation, axes=1)


def uncertainty(sigma, floor: float = 1e-12, entropy_correct: bool = False) -> np.ndarray:
    """H = ½·log(2π·Σ) (or ½·log(2πe·Σ)), with Σ raised to at least `floor`."""
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), floor)
    scale = 2.0 * np.pi * (np.e if entropy_correct else 1.0)
    return 0.5 * np.log(scale * sigma)


def deformation_variance(fields: Sequence[np.ndarray], weights: Sequence[float], steps: int = 6) -> np.ndarray:
    with no_grad():
        deformations = [integrate(np.asarray(f, dtype=np.float64), steps).data for f in fields]
    return variance(deformations, weights)


def deformation_uncertainty(fields: Sequence[np.ndarray], weights: Sequence[float], steps: int = 6,
                            floor: float = 1e-12, entropy_correct: bool = False) -> np.ndarray:
    """Uncertainty of the diffeomorphic deformations Φ^t rather than of the velocities."""
    return uncertainty(deformation_variance(fields, weights, steps), floor, entropy_correct)


def summarize(fields: Sequence[np.ndarray], weights: Sequence[float], config: PosteriorConfig = None,
              steps: Optional[int] = None) -> PosteriorSummary:
    config = config or PosteriorConfig()
    sigma = variance(fields, weights)
    summary = PosteriorSummary(
        mean_velocity=weighted_mean(fields, weights),
        variance=sigma,
        uncertainty=uncertainty(sigma, config.uncertainty_floor, config.entropy_correct),
    )
    if steps is not None:
        summary.deformation_uncertainty = deformation_uncertainty(
            fields, weights, steps, config.uncertainty_floor, config.entropy_correct
        )
    return summary


def register(moving, fixed, store: SnapshotStore, steps: Optional[int] = None,
             with_deformation_uncertainty: bool = True) -> RegistrationResult:
    """
    Register `moving` onto `fixed` with the posterior predictive of `store`.

    Φ integrates the weighted-mean velocity and the registered image is
    `moving` warped through Φ.
    """
    steps = steps or store.integration.steps
    if len(store) == 1:
        logger.warning("Snapshot store holds a single snapshot; uncertainty maps sit at the floor.")

    velocities = sample_velocities(moving, fixed, store)
    summary = summarize(
        velocities, store.weights, store.posterior_config,
        steps=steps if with_deformation_uncertainty else None,
    )
    with no_grad():
        deformation = integrate(summary.mean_velocity, steps).data
        registered = warp(np.asarray(moving, dtype=np.float64), deformation).data
    return RegistrationResult(
        registered=registered,
        deformation=deformation,
        summary=summary,
        velocities=velocities,
    )
