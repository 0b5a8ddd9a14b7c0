"""
RunConfig validation.

A RunConfig is a YAML document with the sections below plus a top-level
`seed`. Every key is optional; missing keys take their value from
`settings.REGISTRATION`.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml
from rest_framework import serializers

from .conf import defaults
from .diffeo import IntegrationConfig
from .losses import REGULARIZE_CHOICES, LossConfig
from .network import BackboneConfig
from .optimizer import NOISE_FORMS, SCHEDULE_KINDS, AdamConfig, NoiseSchedule, TrainingConfig
from .posterior import WEIGHTING_CHOICES, PosteriorConfig

SECTIONS = ('backbone', 'loss', 'noise', 'optimizer', 'integration', 'training', 'posterior', 'data', 'output')


def setting(section: str, key: str):
    """A callable default reading `settings.REGISTRATION` at validation time."""
    return lambda: defaults(section)[key]


class BackboneSerializer(serializers.Serializer):
    spatial_dims = serializers.ChoiceField(choices=[2, 3], default=setting('BACKBONE', 'SPATIAL_DIMS'))
    encoder_channels = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=2,
        default=setting('BACKBONE', 'ENCODER_CHANNELS'),
    )
    decoder_channels = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=1,
        default=setting('BACKBONE', 'DECODER_CHANNELS'),
    )
    leaky_slope = serializers.FloatField(default=setting('BACKBONE', 'LEAKY_SLOPE'))
    kernel_size = serializers.IntegerField(min_value=1, default=setting('BACKBONE', 'KERNEL_SIZE'))
    flow_init_std = serializers.FloatField(min_value=0.0, default=setting('BACKBONE', 'FLOW_INIT_STD'))
    output_channels = serializers.IntegerField(required=False)

    def validate_leaky_slope(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("Leaky slope must lie in (0, 1).")
        return value

    def validate_kernel_size(self, value):
        if value % 2 == 0:
            raise serializers.ValidationError("Kernel size must be odd.")
        return value

    def validate(self, attrs):
        output_channels = attrs.pop('output_channels', None)
        if output_channels is not None and output_channels != attrs['spatial_dims']:
            raise serializers.ValidationError(
                {'output_channels': "The velocity field needs one output channel per spatial dimension."}
            )
        try:
            BackboneConfig(**attrs)
        except ValueError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class LossSerializer(serializers.Serializer):
    lcc_window = serializers.IntegerField(min_value=1, default=setting('LOSS', 'LCC_WINDOW'))
    lambda_smooth = serializers.FloatField(min_value=0.0, default=setting('LOSS', 'LAMBDA_SMOOTH'))
    weight_decay = serializers.FloatField(min_value=0.0, default=setting('LOSS', 'WEIGHT_DECAY'))
    epsilon_var = serializers.FloatField(default=setting('LOSS', 'EPSILON_VAR'))
    regularize = serializers.ChoiceField(choices=REGULARIZE_CHOICES, default=setting('LOSS', 'REGULARIZE'))

    def validate_lcc_window(self, value):
        if value % 2 == 0:
            raise serializers.ValidationError("The LCC window must be odd.")
        return value

    def validate_epsilon_var(self, value):
        if value <= 0:
            raise serializers.ValidationError("epsilon_var must be positive.")
        return value


class NoiseSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=SCHEDULE_KINDS, default=setting('NOISE', 'KIND'))
    target_std = serializers.FloatField(min_value=0.0, required=False, allow_null=True)
    std_divisor = serializers.FloatField(default=setting('NOISE', 'STD_DIVISOR'))
    gamma = serializers.FloatField(default=setting('NOISE', 'GAMMA'))
    a = serializers.FloatField(min_value=0.0, required=False, allow_null=True)
    b = serializers.FloatField(default=setting('NOISE', 'OFFSET_B'))
    form = serializers.ChoiceField(choices=NOISE_FORMS, default=setting('NOISE', 'FORM'))

    def validate_std_divisor(self, value):
        if value <= 0:
            raise serializers.ValidationError("std_divisor must be positive.")
        return value

    def validate_b(self, value):
        if value <= 0:
            raise serializers.ValidationError("The schedule offset b must be positive.")
        return value

    def validate(self, attrs):
        if attrs['kind'] == 'decaying' and not 0.5 < attrs['gamma'] <= 1.0:
            raise serializers.ValidationError(
                {'gamma': "A decaying schedule needs gamma in (0.5, 1] for the step-size conditions to hold."}
            )
        return attrs


class OptimizerSerializer(serializers.Serializer):
    learning_rate = serializers.FloatField(default=setting('OPTIMIZER', 'LEARNING_RATE'))
    beta1 = serializers.FloatField(default=setting('OPTIMIZER', 'BETA1'))
    beta2 = serializers.FloatField(default=setting('OPTIMIZER', 'BETA2'))
    eps = serializers.FloatField(default=setting('OPTIMIZER', 'EPS'))

    def validate(self, attrs):
        try:
            AdamConfig(**attrs)
        except ValueError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class IntegrationSerializer(serializers.Serializer):
    steps = serializers.IntegerField(min_value=1, default=lambda: defaults('INTEGRATION_STEPS'))


class TrainingSerializer(serializers.Serializer):
    iterations = serializers.IntegerField(min_value=1, default=setting('TRAINING', 'ITERATIONS'))
    burn_in = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    snapshots = serializers.IntegerField(min_value=1, default=setting('TRAINING', 'SNAPSHOTS'))
    batch_size = serializers.IntegerField(min_value=1, default=setting('TRAINING', 'BATCH_SIZE'))
    val_every = serializers.IntegerField(min_value=1, default=setting('TRAINING', 'VAL_EVERY'))
    val_pairs = serializers.IntegerField(min_value=1, default=setting('TRAINING', 'VAL_PAIRS'))
    precision = serializers.ChoiceField(choices=[32, 64], default=setting('TRAINING', 'PRECISION'))

    def validate(self, attrs):
        if attrs.get('burn_in') is None:
            attrs['burn_in'] = max(attrs['iterations'] - attrs['snapshots'], 0)
        if attrs['burn_in'] >= attrs['iterations']:
            raise serializers.ValidationError(
                {'burn_in': f"burn_in (t_b = {attrs['burn_in']}) must be smaller than "
                            f"iterations (N = {attrs['iterations']})."}
            )
        attrs.pop('snapshots')
        return attrs


class PosteriorSerializer(serializers.Serializer):
    weighting = serializers.ChoiceField(choices=WEIGHTING_CHOICES, default=setting('POSTERIOR', 'WEIGHTING'))
    weight_floor = serializers.FloatField(default=setting('POSTERIOR', 'WEIGHT_FLOOR'))
    uncertainty_floor = serializers.FloatField(default=setting('POSTERIOR', 'UNCERTAINTY_FLOOR'))
    entropy_correct = serializers.BooleanField(default=setting('POSTERIOR', 'ENTROPY_CORRECT'))

    def validate(self, attrs):
        if attrs['weight_floor'] <= 0 or attrs['uncertainty_floor'] <= 0:
            raise serializers.ValidationError("Posterior floors must be positive.")
        return attrs


class DataSerializer(serializers.Serializer):
    manifest = serializers.CharField()

    def validate_manifest(self, value):
        path = resolve(value, self.context.get('base_dir'))
        if not path.is_file():
            raise serializers.ValidationError(f"Dataset manifest {path} does not exist.")
        return str(path)


class OutputSerializer(serializers.Serializer):
    directory = serializers.CharField()
    run_name = serializers.CharField(required=False, allow_blank=False, max_length=255)

    def validate_directory(self, value):
        path = resolve(value, self.context.get('base_dir'))
        if path.exists() and not path.is_dir():
            raise serializers.ValidationError(f"Output path {path} exists and is not a directory.")
        return str(path)


def resolve(value: str, base_dir) -> Path:
    path = Path(value).expanduser()
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return path


@dataclass(frozen=True)
class RunConfig:
    name: str
    seed: int
    backbone: BackboneConfig
    loss: LossConfig
    noise: NoiseSchedule
    optimizer: AdamConfig
    integration: IntegrationConfig
    training: TrainingConfig
    posterior: PosteriorConfig
    manifest: Path
    output_dir: Path
    document: dict

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.document, sort_keys=True)


class RunConfigSerializer(serializers.Serializer):
    """
    Validates a full RunConfig document.

    Sections missing from the document are validated as empty, so every field
    falls back to its settings default.
    """
    seed = serializers.IntegerField(min_value=0, default=0)
    backbone = BackboneSerializer()
    loss = LossSerializer()
    noise = NoiseSerializer()
    optimizer = OptimizerSerializer()
    integration = IntegrationSerializer()
    training = TrainingSerializer()
    posterior = PosteriorSerializer()
    data = DataSerializer()
    output = OutputSerializer()

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            raise serializers.ValidationError({'non_field_errors': ["A RunConfig must be a mapping of sections."]})
        data = dict(data)
        for section in SECTIONS:
            if data.get(section) is None:
                data[section] = {}
        return super().to_internal_value(data)

    def to_run_config(self) -> RunConfig:
        data = self.validated_data
        optimizer = AdamConfig(**data['optimizer'])
        noise = dict(data['noise'])
        if noise['kind'] == 'fixed':
            target = noise.get('target_std')
            schedule = NoiseSchedule(
                kind='fixed',
                target_std=target if target is not None else optimizer.learning_rate / noise['std_divisor'],
                form=noise['form'],
            )
        else:
            a = noise.get('a')
            schedule = NoiseSchedule(
                kind='decaying',
                a=a if a is not None else optimizer.learning_rate,
                gamma=noise['gamma'],
                b=noise['b'],
                form=noise['form'],
            )
        output_dir = Path(data['output']['directory'])
        return RunConfig(
            name=data['output'].get('run_name') or output_dir.name,
            seed=data['seed'],
            backbone=BackboneConfig(**data['backbone']),
            loss=LossConfig(**data['loss']),
            noise=schedule,
            optimizer=optimizer,
            integration=IntegrationConfig(**data['integration']),
            training=TrainingConfig(**data['training']),
            posterior=PosteriorConfig(**data['posterior']),
            manifest=Path(data['data']['manifest']),
            output_dir=output_dir,
            document=_plain(data),
        )


def _plain(value):
    """Validated data as plain YAML-safe Python types."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def load_run_config(path, seed: Optional[int] = None) -> RunConfig:
    """
    Read and validate a RunConfig file. Relative paths resolve against the file's directory.

    Raises:
        rest_framework.serializers.ValidationError: For unreadable or invalid configurations.
    """
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise serializers.ValidationError({'config': [f"Cannot read {path}: {exc}"]})
    except yaml.YAMLError as exc:
        raise serializers.ValidationError({'config': [f"Unparseable YAML in {path}: {exc}"]})
    if isinstance(document, dict) and seed is not None:
        document = {**document, 'seed': seed}
    serializer = RunConfigSerializer(data=document, context={'base_dir': path.parent})
    serializer.is_valid(raise_exception=True)
    return serializer.to_run_config()
