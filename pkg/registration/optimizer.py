"""
Adam with schedule-controlled Gaussian gradient noise (SGLD-style), the
step-size schedule validator, and the training loop that collects the
post-burn-in weight snapshots.
"""
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import Tape, no_grad
from .conf import defaults
from .diffeo import IntegrationConfig
from .exceptions import NumericalError
from .losses import LossConfig, total_loss
from .network import Backbone, BackboneConfig, WeightSet
from .posterior import PosteriorConfig, SnapshotStore, WeightSnapshot

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ('fixed', 'decaying')
NOISE_FORMS = ('std', 'variance')


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}.")
        for name in ('beta1', 'beta2'):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}.")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}.")


@dataclass
class AdamState:
    """
    Moment estimates of one WeightSet.

    `t` counts completed updates; the next update uses bias corrections for t + 1.
    """
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eta: float = 1e-3
    eps: float = 1e-8
    last_step_size: float = 0.0

    @classmethod
    def fresh(cls, weights: WeightSet, config: AdamConfig = None) -> 'AdamState':
        config = config or AdamConfig()
        return cls(
            m=[np.zeros_like(array) for array in weights.arrays()],
            v=[np.zeros_like(array) for array in weights.arrays()],
            beta1=config.beta1,
            beta2=config.beta2,
            eta=config.learning_rate,
            eps=config.eps,
        )


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Standard deviation of the Gaussian noise added to the gradients at iteration t.

    Attributes:
        kind (str): 'fixed' (constant `target_std`) or 'decaying' (a/(b+t)^γ).
        target_std (float): Value of a fixed schedule.
        gamma (float): Decay exponent γ.
        a (float): Numerator of a decaying schedule.
        b (float): Offset of a decaying schedule.
        form (str): 'std' reads the schedule value as the noise std, 'variance' as its variance.
    """
    kind: str = 'fixed'
    target_std: float = 2e-5
    gamma: float = 0.55
    a: float = 1e-3
    b: float = 1.0
    form: str = 'std'

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}.")
        if self.form not in NOISE_FORMS:
            raise ValueError(f"form must be one of {NOISE_FORMS}, got {self.form!r}.")
        if self.target_std < 0:
            raise ValueError(f"target_std must be non-negative, got {self.target_std}.")
        if self.gamma <= 0 or self.a < 0 or self.b <= 0:
            raise ValueError("A decaying schedule needs gamma > 0, a >= 0 and b > 0.")

    @classmethod
    def fixed(cls, learning_rate: float, divisor: float = 50.0, form: str = 'std') -> 'NoiseSchedule':
        return cls(kind='fixed', target_std=learning_rate / divisor, form=form)

    @classmethod
    def decaying(cls, learning_rate: float, gamma: float = 0.55, b: float = 1.0, form: str = 'std') -> 'NoiseSchedule':
        return cls(kind='decaying', a=learning_rate, gamma=gamma, b=b, form=form)

    def value(self, t: int) -> float:
        if self.kind == 'fixed':
            return float(self.target_std)
        return float(self.a / (self.b + t) ** self.gamma)

    def std(self, t: int) -> float:
        value = self.value(t)
        return float(np.sqrt(value)) if self.form == 'variance' else value

    def alpha(self, t: int, step_size: float) -> float:
        """The derived α^t = s^t / value(t)."""
        value = self.value(t)
        return float('inf') if value == 0 else step_size / value

    def to_dict(self) -> dict:
        return asdict(self)


def inject_noise(grads: Sequence[np.ndarray], schedule: NoiseSchedule, state: AdamState,
                 rng_seed: int) -> List[np.ndarray]:
    """
    Add N(0, std(t)²) noise to every gradient tensor, t = `state.t`.

    Draws come from one stream seeded by (rng_seed, t) and are taken in
    parameter order, so a run is reproducible under its seed.

    Raises:
        NumericalError: If any gradient is not finite.
    """
    for grad in grads:
        if not np.all(np.isfinite(grad)):
            logger.error("Non-finite gradient at iteration %d; halting training", state.t)
            raise NumericalError(f"Non-finite gradient at iteration {state.t}.", iteration=state.t)
    std = schedule.std(state.t)
    if std == 0:
        return [np.array(grad, copy=True) for grad in grads]
    rng = np.random.default_rng([int(rng_seed), int(state.t)])
    return [grad + rng.normal(0.0, std, size=np.shape(grad)).astype(np.asarray(grad).dtype) for grad in grads]


def adam_step(weights: WeightSet, grads: Sequence[np.ndarray], state: AdamState):
    """
    One bias-corrected Adam update with step size s = η / √(v̂ + ε).

    Returns:
        tuple: The updated WeightSet and the (mutated) AdamState.
    """
    state.t += 1
    beta1, beta2 = state.beta1, state.beta2
    updated = []
    step_total = 0.0
    count = 0
    for index, (theta, grad) in enumerate(zip(weights.arrays(), grads)):
        grad = np.asarray(grad, dtype=theta.dtype)
        m = beta1 * state.m[index] + (1 - beta1) * grad
        v = beta2 * state.v[index] + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** state.t)
        v_hat = v / (1 - beta2 ** state.t)
        step = state.eta / np.sqrt(v_hat + state.eps)
        updated.append(theta - step * m_hat)
        state.m[index] = m
        state.v[index] = v
        step_total += float(step.sum())
        count += step.size
    state.last_step_size = step_total / max(count, 1)
    return weights.replace(updated), state


class EnvelopeFit(NamedTuple):
    c: float
    c1: float
    c2: float
    spread: float
    within: bool


class ScheduleReport(NamedTuple):
    passes: bool
    reasons: List[str]
    partial_sum: float
    partial_sum_squares: float
    envelope: Optional[EnvelopeFit] = None


def fit_envelope(step_sizes: Sequence[float], schedule: NoiseSchedule, max_spread: Optional[float] = None) -> EnvelopeFit:
    """
    Fit observed step sizes s^t against the polynomial reference a/(b+t)^γ.

    c is the least-squares scale; c1 and c2 are the smallest and largest
    ratios s^t / reference(t), so c1·ref ≤ s ≤ c2·ref over the trajectory.
    """
    if max_spread is None:
        max_spread = defaults('SCHEDULE_ENVELOPE_MAX_SPREAD')
    steps = np.asarray(step_sizes, dtype=np.float64)
    t = np.arange(len(steps), dtype=np.float64)
    reference = 1.0 / (schedule.b + t) ** schedule.gamma
    c = float(steps @ reference / (reference @ reference))
    ratios = steps / reference
    c1, c2 = float(ratios.min()), float(ratios.max())
    spread = c2 / c1 if c1 > 0 else float('inf')
    return EnvelopeFit(c=c, c1=c1, c2=c2, spread=spread, within=bool(c1 > 0 and spread <= max_spread))


def validate_schedule(schedule: NoiseSchedule, horizon: int, step_sizes: Optional[Sequence[float]] = None,
                      max_spread: Optional[float] = None) -> ScheduleReport:
    """
    Check a schedule against the step-size conditions Σε^t = ∞ and Σ(ε^t)² < ∞.

    Polynomial decay a/(b+t)^γ satisfies both exactly when γ ∈ (0.5, 1]; a fixed
    schedule violates the second. Partial sums up to `horizon` are reported for
    reference. When observed step sizes are given, an envelope fit is attached;
    it does not affect `passes`.
    """
    reasons = []
    if schedule.kind == 'fixed':
        reasons.append("fixed step size: the sum of squared step sizes diverges (Σ(ε^t)² = ∞)")
    elif schedule.gamma <= 0.5:
        reasons.append(
            f"gamma = {schedule.gamma} <= 0.5: the sum of squared step sizes diverges (Σ(ε^t)² = ∞)"
        )
    elif schedule.gamma > 1.0:
        reasons.append(f"gamma = {schedule.gamma} > 1: the sum of step sizes converges (Σε^t < ∞)")

    values = np.array([schedule.value(t) for t in range(max(int(horizon), 0))], dtype=np.float64)
    envelope = None
    if step_sizes is not None and len(step_sizes):
        envelope = fit_envelope(step_sizes, schedule, max_spread)
    return ScheduleReport(
        passes=not reasons,
        reasons=reasons,
        partial_sum=float(values.sum()),
        partial_sum_squares=float((values * values).sum()),
        envelope=envelope,
    )


@dataclass(frozen=True)
class TrainingConfig:
    """
    Attributes:
        iterations (int): N. Iterations are indexed t = 0..N-1.
        burn_in (int): t_b; snapshots are kept for t >= t_b. Defaults to N - 8.
        batch_size (int): Training pairs averaged per iteration.
        val_every (int): Validation cadence before burn-in.
        val_pairs (int): Number of validation pairs in the validation loss.
        precision (int): 32 or 64 bit weights.
    """
    iterations: int = 4000
    burn_in: Optional[int] = None
    batch_size: int = 1
    val_every: int = 50
    val_pairs: int = 10
    precision: int = 32

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}.")
        if self.burn_in is None:
            object.__setattr__(self, 'burn_in', max(self.iterations - 8, 0))
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError(f"burn_in must satisfy 0 <= t_b < N, got t_b={self.burn_in}, N={self.iterations}.")
        if self.batch_size < 1 or self.val_every < 1 or self.val_pairs < 1:
            raise ValueError("batch_size, val_every and val_pairs must be positive.")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}.")

    @property
    def snapshots(self) -> int:
        return self.iterations - self.burn_in

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


class CurvePoint(NamedTuple):
    iteration: int
    train_loss: float
    val_loss: Optional[float]
    noise_std: float
    step_size: float


@dataclass
class TrainingResult:
    store: SnapshotStore
    initial_val_loss: float
    curves: List[CurvePoint] = field(default_factory=list)

    @property
    def validation_curve(self) -> List[CurvePoint]:
        return [point for point in self.curves if point.val_loss is not None]

    @property
    def final_val_loss(self) -> float:
        return self.validation_curve[-1].val_loss


def write_curves(path, curves: Sequence[CurvePoint]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(CurvePoint._fields)
        for point in curves:
            writer.writerow([
                point.iteration,
                repr(point.train_loss),
                '' if point.val_loss is None else repr(point.val_loss),
                repr(point.noise_std),
                repr(point.step_size),
            ])
    return path


def mean_loss(pairs, backbone: Backbone, params, loss_config: LossConfig, steps: int):
    total = None
    for pair in pairs:
        velocity = backbone.forward(pair.moving, pair.fixed, params)
        loss = total_loss(pair.moving, pair.fixed, velocity, params, loss_config, steps)
        total = loss if total is None else total + loss
    return total * (1.0 / len(pairs))


def validation_loss(pairs, backbone: Backbone, weights: WeightSet, loss_config: LossConfig, steps: int) -> float:
    with no_grad():
        return mean_loss(pairs, backbone, weights, loss_config, steps).item()


def train(dataset, backbone_config: BackboneConfig = None, loss_config: LossConfig = None,
          schedule: NoiseSchedule = None, adam_config: AdamConfig = None,
          integration: IntegrationConfig = None, training: TrainingConfig = None,
          posterior_config: PosteriorConfig = None, seed: int = 0) -> TrainingResult:
    """
    Train the backbone with noisy Adam and keep the snapshots of iterations t >= t_b.

    Args:
        dataset: Anything with `train` and `val` sequences of pairs exposing
            `moving` and `fixed` arrays (see `volumes.Dataset`).
        seed (int): Seeds weight initialisation, batch selection and gradient noise.

    Returns:
        TrainingResult: The snapshot store and the loss curves.

    Raises:
        NumericalError: If a loss or gradient stops being finite.
    """
    backbone_config = backbone_config or BackboneConfig()
    loss_config = loss_config or LossConfig()
    adam_config = adam_config or AdamConfig()
    schedule = schedule or NoiseSchedule.fixed(adam_config.learning_rate)
    integration = integration or IntegrationConfig()
    training = training or TrainingConfig()

    train_pairs = list(dataset.train)
    val_pairs = list(dataset.val)[:training.val_pairs]
    if not train_pairs or not val_pairs:
        raise ValueError("Training needs at least one training pair and one validation pair.")

    backbone = Backbone(backbone_config)
    weights = backbone.init_weights(seed, dtype=training.dtype)
    state = AdamState.fresh(weights, adam_config)
    batch_rng = np.random.default_rng(seed)
    steps = integration.steps

    logger.info(
        "Training %d parameters for %d iterations (burn-in %d, %d snapshots, %d training pairs)",
        weights.parameter_count, training.iterations, training.burn_in, training.snapshots, len(train_pairs),
    )
    initial_val = validation_loss(val_pairs, backbone, weights, loss_config, steps)
    logger.info("Initial val_loss %.6f", initial_val)
    curves = []
    snapshots = []

    for t in range(training.iterations):
        batch = [train_pairs[i] for i in batch_rng.integers(len(train_pairs), size=training.batch_size)]
        with Tape() as tape:
            params = weights.as_tensors(requires_grad=True)
            loss = mean_loss(batch, backbone, params, loss_config, steps)
        train_value = loss.item()
        if not np.isfinite(train_value):
            logger.error("Non-finite training loss at iteration %d; halting training", t)
            raise NumericalError(f"Non-finite training loss at iteration {t}.", iteration=t)

        gradients = tape.backward(loss)
        grads = [gradients.get(params[name], np.zeros_like(weights[name])) for name in weights.names]
        noise_std = schedule.std(state.t)
        noisy = inject_noise(grads, schedule, state, seed)
        weights, state = adam_step(weights, noisy, state)
        if not weights.is_finite():
            logger.error("Non-finite weights after iteration %d; halting training", t)
            raise NumericalError(f"Non-finite weights after iteration {t}.", iteration=t)

        keep = t >= training.burn_in
        val_value = None
        if keep or t % training.val_every == 0 or t == training.iterations - 1:
            val_value = validation_loss(val_pairs, backbone, weights, loss_config, steps)
            if not np.isfinite(val_value):
                logger.error("Non-finite validation loss at iteration %d; halting training", t)
                raise NumericalError(f"Non-finite validation loss at iteration {t}.", iteration=t)
            logger.info(
                "iter %d train_loss %.6f val_loss %.6f noise_std %.3g step %.3g",
                t, train_value, val_value, noise_std, state.last_step_size,
            )
        curves.append(CurvePoint(t, train_value, val_value, noise_std, state.last_step_size))

        if keep:
            snapshots.append(WeightSnapshot(iteration=t, weights=weights.copy(), validation_loss=val_value))
            logger.info("Stored snapshot %d/%d at iteration %d", len(snapshots), training.snapshots, t)

    store = SnapshotStore(snapshots, backbone_config, integration, loss_config, posterior_config)
    return TrainingResult(store=store, initial_val_loss=initial_val, curves=curves)
