from django.db import models, transaction
from django.utils import timezone


class TrainingRun(models.Model):
    """
    Registry entry for one offline training run.

    The snapshot store on disk is the source of truth for registration; this
    row and its SnapshotRecords mirror it for browsing in the admin.

    Attributes:
        name (str): Run name, by default the output directory name.
        config (str): The validated RunConfig as YAML.
        seed (int): Seed of the run.
        status (str): 'running', 'completed' or 'failed'.
        store_path (str): Directory of the snapshot store.
        iterations (int): N.
        burn_in (int): t_b.
        final_val_loss (float): Validation loss after the last iteration.
        failure_reason (str): Diagnostic for failed runs.
        created_at (datetime): When training started.
        finished_at (datetime): When training completed or failed.
    """
    RUNNING = 'running'
    COMPLETED = 'completed'
    FAILED = 'failed'

    STATUS_CHOICES = [
        (RUNNING, 'Running'),
        (COMPLETED, 'Completed'),
        (FAILED, 'Failed'),
    ]

    name = models.CharField(max_length=255)
    config = models.TextField()
    seed = models.PositiveIntegerField(default=0)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default=RUNNING)
    store_path = models.CharField(max_length=1024, blank=True)
    iterations = models.PositiveIntegerField()
    burn_in = models.PositiveIntegerField()
    final_val_loss = models.FloatField(blank=True, null=True)
    failure_reason = models.TextField(blank=True, default='')
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(blank=True, null=True)

    class Meta:
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['status'], name='registratio_status_6e1d2a_idx'),
            models.Index(fields=['created_at'], name='registratio_created_4b7f90_idx'),
        ]

    def __str__(self) -> str:
        return f"{self.name} ({self.status})"

    def mark_completed(self, store, store_path, final_val_loss: float) -> None:
        """Record the finished run and one SnapshotRecord per stored snapshot."""
        with transaction.atomic():
            self.status = self.COMPLETED
            self.store_path = str(store_path)
            self.final_val_loss = final_val_loss
            self.finished_at = timezone.now()
            self.save()
            self.snapshots.all().delete()
            SnapshotRecord.objects.bulk_create([
                SnapshotRecord(
                    run=self,
                    iteration=snapshot.iteration,
                    validation_loss=snapshot.validation_loss,
                    weight=float(weight),
                    file_name=snapshot.file_name,
                )
                for snapshot, weight in zip(store, store.weights)
            ])

    def mark_failed(self, reason: str) -> None:
        self.status = self.FAILED
        self.failure_reason = reason
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'failure_reason', 'finished_at'])


class SnapshotRecord(models.Model):
    """
    One post-burn-in weight snapshot of a TrainingRun.

    Attributes:
        run (TrainingRun): The owning run.
        iteration (int): Training iteration t of the snapshot.
        validation_loss (float): L^t on the validation pairs.
        weight (float): Unnormalised posterior weight w^t.
        file_name (str): Checkpoint file inside the run's store directory.
    """
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='snapshots')
    iteration = models.PositiveIntegerField()
    validation_loss = models.FloatField()
    weight = models.FloatField()
    file_name = models.CharField(max_length=255)

    class Meta:
        ordering = ['run', 'iteration']
        constraints = [
            models.UniqueConstraint(fields=['run', 'iteration'], name='unique_run_iteration')
        ]

    def __str__(self) -> str:
        return f"{self.run.name} @ {self.iteration} (val {self.validation_loss:.4f})"
