import math

from django.core.exceptions import ValidationError
from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    RUNNING = 'running'
    SUCCEEDED = 'succeeded'
    FAILED = 'failed'

    STATUS_CHOICES = [
        (RUNNING, 'Running'),
        (SUCCEEDED, 'Succeeded'),
        (FAILED, 'Failed'),
    ]

    subcommand = models.CharField(max_length=20)
    experiment = models.CharField(max_length=100)
    output_dir = models.CharField(max_length=500)
    config = models.JSONField(default=dict)
    seeds = models.JSONField(default=list)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default=RUNNING)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.subcommand} {self.experiment} ({self.get_status_display()})"

    def finish(self, status, error=''):
        self.status = status
        self.error = error
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'error', 'finished_at'])

    def record_metrics(self, records):
        """Append harness records (experiments.MetricsRecord) to this run."""
        rows = [
            MetricsRecord(
                run=self,
                method=record.method,
                seed=record.seed,
                x=float(record.x),
                metric=record.metric,
                value=float(record.value),
                seconds=float(record.seconds),
            )
            for record in records
        ]
        for row in rows:
            row.clean()
        return MetricsRecord.objects.bulk_create(rows)


class MetricsRecord(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='metrics')
    method = models.CharField(max_length=50)
    seed = models.PositiveIntegerField()
    x = models.FloatField()
    metric = models.CharField(max_length=100)
    value = models.FloatField()
    seconds = models.FloatField(default=0)

    class Meta:
        ordering = ['id']

    def __str__(self):
        return f"{self.method} seed={self.seed} {self.metric}@{self.x:g} = {self.value:g}"

    def clean(self):
        if not math.isfinite(self.value):
            raise ValidationError({'value': 'Metric values must be finite.'})
        if self.seconds < 0:
            raise ValidationError({'seconds': 'Wall-clock seconds cannot be negative.'})

    def save(self, *args, **kwargs):
        # Append-only ledger
        if self.pk is not None:
            raise ValidationError("Metrics records are append-only and cannot be modified.")
        self.clean()
        super().save(*args, **kwargs)
