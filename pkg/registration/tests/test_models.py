from django.db import IntegrityError
from django.test import TestCase

from registration.models import SnapshotRecord, TrainingRun

from .mixins import TinyBackboneMixin


class TrainingRunTests(TinyBackboneMixin, TestCase):
    """
    Tests for the training-run registry.
    """

    def setUp(self):
        self.run = TrainingRun.objects.create(name='demo', config='seed: 0\n', iterations=103, burn_in=100)

    def test_new_runs_are_running(self):
        self.assertEqual(self.run.status, TrainingRun.RUNNING)
        self.assertEqual(str(self.run), 'demo (running)')
        self.assertIsNone(self.run.finished_at)

    def test_mark_completed_records_every_snapshot(self):
        store = self.make_store(losses=[-0.5, -0.6, -0.7])
        self.run.mark_completed(store, '/tmp/demo/store', final_val_loss=-0.7)

        self.run.refresh_from_db()
        self.assertEqual(self.run.status, TrainingRun.COMPLETED)
        self.assertEqual(self.run.store_path, '/tmp/demo/store')
        self.assertIsNotNone(self.run.finished_at)
        records = list(self.run.snapshots.all())
        self.assertEqual([record.iteration for record in records], [100, 101, 102])
        self.assertEqual([record.weight for record in records], [0.5, 0.6, 0.7])
        self.assertEqual(records[0].file_name, 'snapshot-000100.ckpt')
        self.assertEqual(str(records[0]), 'demo @ 100 (val -0.5000)')

    def test_mark_completed_replaces_earlier_records(self):
        store = self.make_store()
        self.run.mark_completed(store, '/tmp/a', final_val_loss=-0.5)
        self.run.mark_completed(store, '/tmp/b', final_val_loss=-0.5)
        self.assertEqual(self.run.snapshots.count(), 3)

    def test_mark_failed(self):
        self.run.mark_failed('Non-finite training loss at iteration 7.')
        self.run.refresh_from_db()
        self.assertEqual(self.run.status, TrainingRun.FAILED)
        self.assertIn('iteration 7', self.run.failure_reason)
        self.assertIsNotNone(self.run.finished_at)

    def test_iterations_are_unique_per_run(self):
        SnapshotRecord.objects.create(run=self.run, iteration=100, validation_loss=-0.5, weight=0.5, file_name='a')
        with self.assertRaises(IntegrityError):
            SnapshotRecord.objects.create(run=self.run, iteration=100, validation_loss=-0.4, weight=0.4, file_name='b')
