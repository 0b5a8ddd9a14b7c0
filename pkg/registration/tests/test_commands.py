import csv
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
import yaml
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from registration.exceptions import NumericalError, ShapeError
from registration.management.commands._base import NUMERIC_ERROR, USAGE_ERROR
from registration.models import TrainingRun
from registration.volumes import load_dataset, write_volume


class CommandTestCase(TestCase):
    """
    Generates a tiny dataset and trains a tiny backbone once for every test of the class.
    """

    @classmethod
    def setUpTestData(cls):
        cls.root = Path(tempfile.mkdtemp())
        cls.addClassCleanup(shutil.rmtree, cls.root, ignore_errors=True)
        cls.data_dir = cls.root / 'data'
        cls.manifest = cls.data_dir / 'manifest.yaml'
        call_command(
            'generate_dataset', '--out', str(cls.data_dir), '--pairs', '6', '--shape', '16', '16',
            '--max-displacement', '1.5', stdout=StringIO(),
        )
        cls.config_path = cls.write_config('run.yaml', cls.run_document(cls.root / 'run'))
        output = StringIO()
        call_command('train', '--config', str(cls.config_path), stdout=output)
        cls.train_output = output.getvalue()
        cls.store = cls.root / 'run' / 'store'

    @classmethod
    def run_document(cls, output_dir, **training):
        return {
            'seed': 0,
            'backbone': {'encoder_channels': [4, 4], 'decoder_channels': [4], 'flow_init_std': 0.05},
            'loss': {'lcc_window': 5},
            'training': {
                'iterations': 3, 'snapshots': 2, 'val_every': 1, 'val_pairs': 1, 'precision': 64, **training,
            },
            'data': {'manifest': str(cls.manifest)},
            'output': {'directory': str(output_dir)},
        }

    @classmethod
    def write_config(cls, name, document):
        path = cls.root / name
        path.write_text(yaml.safe_dump(document), encoding='utf-8')
        return path

    def call(self, *args):
        out = StringIO()
        call_command(*args, stdout=out)
        return out.getvalue()

    def assertExitCode(self, code, *args):
        with self.assertRaises(CommandError) as context:
            self.call(*args)
        self.assertEqual(context.exception.returncode, code)
        return context.exception


class GenerateAndTrainTests(CommandTestCase):

    def test_dataset_layout(self):
        dataset = load_dataset(self.manifest)
        self.assertEqual([len(dataset.train), len(dataset.val), len(dataset.test)], [3, 2, 1])
        self.assertEqual(dataset.metadata['family'], 'blobs')
        self.assertEqual(dataset.shape, (16, 16))

    def test_train_writes_the_store_and_records_the_run(self):
        self.assertEqual(sorted(path.name for path in self.store.glob('*.ckpt')),
                         ['snapshot-000001.ckpt', 'snapshot-000002.ckpt'])
        self.assertTrue((self.store / 'manifest.yaml').is_file())
        self.assertTrue((self.root / 'run' / 'curves.csv').is_file())
        self.assertIn('2 snapshots', self.train_output)

        run = TrainingRun.objects.get(name='run')
        self.assertEqual(run.status, TrainingRun.COMPLETED)
        self.assertEqual((run.iterations, run.burn_in), (3, 1))
        self.assertEqual(list(run.snapshots.values_list('iteration', flat=True)), [1, 2])
        self.assertIsNotNone(run.final_val_loss)
        self.assertIn('lcc_window: 5', run.config)

    def test_missing_manifest_is_a_usage_error(self):
        document = self.run_document(self.root / 'missing')
        document['data']['manifest'] = str(self.root / 'absent.yaml')
        self.assertExitCode(USAGE_ERROR, 'train', '--config', str(self.write_config('missing.yaml', document)))

    def test_burn_in_at_the_last_iteration_is_a_usage_error(self):
        document = self.run_document(self.root / 'late', burn_in=3)
        self.assertExitCode(USAGE_ERROR, 'train', '--config', str(self.write_config('late.yaml', document)))

    def test_numerical_failure_exits_with_three_and_marks_the_run_failed(self):
        path = self.write_config('broken.yaml', self.run_document(self.root / 'broken'))
        with mock.patch('registration.management.commands.train.train',
                        side_effect=NumericalError('Non-finite training loss.', iteration=5)):
            error = self.assertExitCode(NUMERIC_ERROR, 'train', '--config', str(path))
        self.assertIn('iteration 5', str(error))
        run = TrainingRun.objects.get(name='broken')
        self.assertEqual(run.status, TrainingRun.FAILED)
        self.assertIn('Non-finite', run.failure_reason)

    def test_shape_failure_during_training_marks_the_run_failed(self):
        path = self.write_config('indivisible.yaml', self.run_document(self.root / 'indivisible'))
        with mock.patch('registration.management.commands.train.train',
                        side_effect=ShapeError('Volume (15, 15) is not divisible by 4.')), \
                self.assertLogs('registration.management.commands.train', 'ERROR'):
            self.assertExitCode(USAGE_ERROR, 'train', '--config', str(path))
        run = TrainingRun.objects.get(name='indivisible')
        self.assertEqual(run.status, TrainingRun.FAILED)
        self.assertIn('not divisible', run.failure_reason)
        self.assertIsNotNone(run.finished_at)

    def test_failure_to_write_outputs_marks_the_run_failed(self):
        path = self.write_config('readonly.yaml', self.run_document(self.root / 'readonly'))
        with mock.patch('registration.management.commands.train.write_curves',
                        side_effect=OSError('Read-only file system')), self.assertRaises(OSError):
            self.call('train', '--config', str(path))
        run = TrainingRun.objects.get(name='readonly')
        self.assertEqual(run.status, TrainingRun.FAILED)
        self.assertEqual(run.snapshots.count(), 0)


class RegisterCommandTests(CommandTestCase):

    def setUp(self):
        pair = load_dataset(self.manifest, splits=('test',)).test[0]
        self.moving = self.data_dir / pair.pair_id / 'moving.vol'
        self.fixed = self.data_dir / pair.pair_id / 'fixed.vol'
        self.out = self.root / 'registered' / pair.pair_id

    def test_writes_registration_outputs(self):
        output = self.call('register', '--store', str(self.store), '--moving', str(self.moving),
                           '--fixed', str(self.fixed), '--out', str(self.out), '--preview')
        self.assertIn('Registered with 2 snapshots', output)
        for name in ('registered.vol', 'deformation.vol', 'variance.vol', 'uncertainty.vol',
                     'deformation_uncertainty.vol', 'registered.pgm', 'uncertainty.pgm'):
            self.assertTrue((self.out / name).is_file(), name)

    def test_shape_mismatch_is_a_usage_error(self):
        small = write_volume(self.root / 'small.vol', np.zeros((8, 8)))
        self.assertExitCode(USAGE_ERROR, 'register', '--store', str(self.store), '--moving', str(self.moving),
                            '--fixed', str(small), '--out', str(self.out))

    def test_missing_store_is_a_usage_error(self):
        self.assertExitCode(USAGE_ERROR, 'register', '--store', str(self.root / 'nowhere'),
                            '--moving', str(self.moving), '--fixed', str(self.fixed), '--out', str(self.out))


class EvaluationCommandTests(CommandTestCase):

    def test_evaluate_against_its_own_baseline(self):
        first = self.root / 'eval' / 'first.csv'
        output = self.call('evaluate', '--store', str(self.store), '--manifest', str(self.manifest),
                           '--out', str(first))
        self.assertIn('Evaluated 1 pairs', output)

        second = self.root / 'eval' / 'second.csv'
        output = self.call('evaluate', '--store', str(self.store), '--manifest', str(self.manifest),
                           '--out', str(second), '--baseline-csv', str(first),
                           '--sigma', '0.1', '--mix-alpha', '0.5')
        self.assertIn('t = 0.0000, p = 1', output)
        with (self.root / 'eval' / 'second_robustness.csv').open(newline='', encoding='utf-8') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual([row[0] for row in rows[1:]], ['gaussian', 'mixed'])

    def test_malformed_manifest_is_a_usage_error(self):
        bad = self.root / 'bad.yaml'
        bad.write_text('format_version: 1\nshape: [16, 16]\n', encoding='utf-8')
        self.assertExitCode(USAGE_ERROR, 'evaluate', '--store', str(self.store), '--manifest', str(bad),
                            '--out', str(self.root / 'bad.csv'))

    def test_uncertainty_over_three_noise_levels(self):
        out = self.root / 'uncertainty' / 'noise.csv'
        output = self.call('uncertainty', '--store', str(self.store), '--manifest', str(self.manifest),
                           '--sigma', '0', '--sigma', '0.1', '--sigma', '0.2', '--out', str(out))
        self.assertIn('sigma 0.2', output)
        with out.open(newline='', encoding='utf-8') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(len(rows), 5)
        self.assertEqual(rows[-1][0], 'pearson_r')
        self.assertTrue((out.parent / 'noise_scatter.csv').is_file())

    def test_single_noise_level_is_a_usage_error(self):
        self.assertExitCode(USAGE_ERROR, 'uncertainty', '--store', str(self.store), '--manifest', str(self.manifest),
                            '--sigma', '0.1', '--out', str(self.root / 'single.csv'))
