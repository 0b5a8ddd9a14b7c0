import logging

from registration.models import TrainingRun
from registration.optimizer import train, write_curves
from registration.serializers import load_run_config
from registration.volumes import load_dataset

from ._base import RegistrationCommand

logger = logging.getLogger(__name__)


class Command(RegistrationCommand):
    help = "Train the velocity-field backbone with noisy Adam and write the snapshot store and loss curves."

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help="RunConfig YAML file.")
        parser.add_argument('--seed', type=int, help="Override the seed of the RunConfig.")

    def run(self, config, seed=None, **options):
        cfg = load_run_config(config, seed=seed)
        dataset = load_dataset(cfg.manifest, splits=('train', 'val'))
        store_dir = cfg.output_dir / 'store'

        record = TrainingRun.objects.create(
            name=cfg.name,
            config=cfg.to_yaml(),
            seed=cfg.seed,
            iterations=cfg.training.iterations,
            burn_in=cfg.training.burn_in,
            store_path=str(store_dir),
        )
        try:
            result = train(
                dataset,
                backbone_config=cfg.backbone,
                loss_config=cfg.loss,
                schedule=cfg.noise,
                adam_config=cfg.optimizer,
                integration=cfg.integration,
                training=cfg.training,
                posterior_config=cfg.posterior,
                seed=cfg.seed,
            )
            result.store.save(store_dir)
            curves = write_curves(cfg.output_dir / 'curves.csv', result.curves)
        except Exception as exc:
            logger.error("Training run %s failed: %s", cfg.name, exc)
            record.mark_failed(str(exc) or type(exc).__name__)
            raise

        record.mark_completed(result.store, store_dir, result.final_val_loss)

        self.stdout.write(self.style.SUCCESS(
            f"Trained {cfg.name}: val loss {result.initial_val_loss:.4f} -> {result.final_val_loss:.4f}, "
            f"{len(result.store)} snapshots in {store_dir}, curves in {curves}"
        ))
