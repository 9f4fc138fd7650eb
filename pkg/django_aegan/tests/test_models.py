import math

from django.db import IntegrityError
from django.test import TestCase

from django_aegan.management.commands.eval import store_metrics
from django_aegan.models import ExperimentRun, MetricRecord
from django_aegan.serializers import ExperimentRunSerializer


class ExperimentRunTestCase(TestCase):

    @classmethod
    def setUpTestData(cls):
        cls.train_run = ExperimentRun.objects.create(command='train', seed=3, run_dir='/tmp/train', config={'seed': 3})
        cls.eval_run = ExperimentRun.objects.create(
            command='eval',
            run_dir='/tmp/eval',
            status=ExperimentRun.STATUS_FINISHED
        )

    def test_defaults(self):
        self.assertEqual(self.train_run.status, ExperimentRun.STATUS_RUNNING)
        self.assertEqual(self.train_run.summary, {})
        self.assertIsNone(self.train_run.finished_at)
        self.assertEqual(str(self.train_run), 'train #{} (running)'.format(self.train_run.pk))

    def test_queryset_filters(self):
        self.assertEqual(list(ExperimentRun.objects.finished()), [self.eval_run])
        self.assertEqual(list(ExperimentRun.objects.for_command('train')), [self.train_run])
        # newest first
        self.assertEqual(ExperimentRun.objects.first(), self.eval_run)

    def test_serializer_is_read_only(self):
        data = ExperimentRunSerializer(self.train_run).data
        self.assertEqual(data['command'], 'train')
        self.assertEqual(data['config'], {'seed': 3})
        self.assertEqual(set(data), set(ExperimentRunSerializer.Meta.fields))


class MetricRecordTestCase(TestCase):

    @classmethod
    def setUpTestData(cls):
        cls.metric_run = ExperimentRun.objects.create(command='eval', run_dir='/tmp/eval')

    def row(self, subject, drf, source='model', psnr=40.0, ssim=0.9, nrmse=2.0, **extra):
        return dict(subject=subject, drf=drf, source=source, psnr=psnr, ssim=ssim, nrmse=nrmse, **extra)

    def test_summary_by_drf(self):
        store_metrics(self.metric_run, [
            self.row('a', 4, psnr=40.0),
            self.row('b', 4, psnr=42.0),
            self.row('a', 4, source='low_dose', psnr=30.0),
            self.row('a', 100, psnr=35.0, nrmse=4.0),
        ])
        summary = list(self.metric_run.metrics.summary_by_drf())
        self.assertEqual([(s['drf'], s['source']) for s in summary], [(4, 'low_dose'), (4, 'model'), (100, 'model')])
        self.assertEqual(summary[1]['psnr'], 41.0)
        self.assertEqual(summary[1]['subjects'], 2)
        self.assertEqual(summary[2]['nrmse'], 4.0)
        self.assertEqual(self.metric_run.metrics.for_drf(100).count(), 1)

    def test_fold_rows_are_averaged(self):
        store_metrics(self.metric_run, [
            self.row('a', 20, psnr=40.0, fold=1),
            self.row('a', 20, psnr=44.0, fold=2),
        ])
        record = MetricRecord.objects.get(run=self.metric_run, subject='a', drf=20)
        self.assertEqual(record.psnr, 42.0)

    def test_infinite_psnr_is_stored_as_null(self):
        store_metrics(self.metric_run, [self.row('a', 10, psnr=math.inf, nrmse=0.0)])
        self.assertIsNone(MetricRecord.objects.get(run=self.metric_run, drf=10).psnr)

    def test_one_record_per_subject_dose_and_source(self):
        MetricRecord.objects.create(run=self.metric_run, subject='a', drf=50, psnr=1.0, ssim=0.5, nrmse=1.0)
        with self.assertRaises(IntegrityError):
            MetricRecord.objects.create(run=self.metric_run, subject='a', drf=50, psnr=2.0, ssim=0.5, nrmse=1.0)

    def test_records_follow_their_run(self):
        store_metrics(self.metric_run, [self.row('a', 4)])
        self.metric_run.delete()
        self.assertFalse(MetricRecord.objects.exists())
