from django.db import models
from django.db.models import Avg, Count

from django_aegan.volumes import DoseLevel


class ExperimentRunQuerySet(models.QuerySet):

    def finished(self) -> models.QuerySet['ExperimentRun']:
        return self.filter(status=ExperimentRun.STATUS_FINISHED)

    def for_command(self, command: str) -> models.QuerySet['ExperimentRun']:
        return self.filter(command=command)


class ExperimentRun(models.Model):
    STATUS_RUNNING = 'running'
    STATUS_FINISHED = 'finished'
    STATUS_FAILED = 'failed'
    STATUS_CHOICES = (
        (STATUS_RUNNING, 'Running'),
        (STATUS_FINISHED, 'Finished'),
        (STATUS_FAILED, 'Failed'),
    )

    command = models.CharField(max_length=32)
    status = models.CharField(
        max_length=8,
        choices=STATUS_CHOICES,
        default=STATUS_RUNNING
    )
    seed = models.IntegerField(default=0)
    run_dir = models.CharField(max_length=512)
    config = models.JSONField(default=dict)
    summary = models.JSONField(default=dict, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    objects = ExperimentRunQuerySet.as_manager()

    class Meta:
        ordering = ('-created_at', '-id')

    def __str__(self) -> str:
        return '{} #{} ({})'.format(self.command, self.pk, self.status)


class MetricRecordQuerySet(models.QuerySet):

    def for_drf(self, drf) -> models.QuerySet['MetricRecord']:
        return self.filter(drf=DoseLevel.parse(drf))

    def summary_by_drf(self) -> models.QuerySet:
        """
        Mean metrics per `(drf, source)` pair, ordered by DRF.
        """
        return self.values('drf', 'source')\
            .annotate(psnr=Avg('psnr'), ssim=Avg('ssim'), nrmse=Avg('nrmse'), subjects=Count('subject'))\
            .order_by('drf', 'source')


class MetricRecord(models.Model):
    SOURCE_MODEL = 'model'
    SOURCE_LOW_DOSE = 'low_dose'
    SOURCE_CHOICES = (
        (SOURCE_MODEL, 'Synthesized'),
        (SOURCE_LOW_DOSE, 'Low-dose input'),
    )

    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        related_name='metrics'
    )
    subject = models.CharField(max_length=64)
    drf = models.IntegerField(choices=DoseLevel.choices)
    source = models.CharField(
        max_length=8,
        choices=SOURCE_CHOICES,
        default=SOURCE_MODEL
    )
    psnr = models.FloatField(null=True)
    ssim = models.FloatField()
    nrmse = models.FloatField()

    objects = MetricRecordQuerySet.as_manager()

    class Meta:
        unique_together = (
            ('run', 'subject', 'drf', 'source'),
        )
