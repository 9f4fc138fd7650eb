import csv
import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings

from django_aegan.evaluation import MetricsReport
from django_aegan.models import ExperimentRun, MetricRecord
from django_aegan.phantoms import PhantomSpec, build_dataset
from django_aegan.volumes import DatasetManifest


TINY_TRAIN = {
    'patch_shape': [8, 8, 8],
    'stride': [4, 4, 4],
    'depth_strides': [[2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 1, 1], [1, 1, 1]],
    'base_channels': 2,
    'batch_size': 2,
    'drf_mix': [4, 100],
    'max_epochs': 1,
    'steps_per_epoch': 2,
    'val_patches': 1,
}


def header(path):
    with Path(path).open(newline='') as fh:
        return next(csv.reader(fh))


class CommandTestCase(TestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        build_dataset(3, [4, 100], PhantomSpec.for_profile((16, 16, 16)), 8, cls.root / 'data')
        cls.manifest = str(cls.root / 'data' / DatasetManifest.FILENAME)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def write_config(self, name, **blocks):
        path = self.root / '{}.json'.format(name)
        path.write_text(json.dumps(dict({'schema_version': 1}, **blocks)))
        return str(path)

    def call(self, command, *args, **kwargs):
        out = StringIO()
        call_command(command, *args, stdout=out, **kwargs)
        return out.getvalue()

    def train_model(self, name, **overrides):
        config = self.write_config(name, manifest=self.manifest, train=dict(TINY_TRAIN, **overrides))
        out = self.root / name
        self.call('train', config=config, out=str(out))
        return out


class PhantomGenCommandTestCase(CommandTestCase):

    def test_generates_the_dataset(self):
        config = self.write_config(
            'phantom',
            seed=2,
            phantom={'shape': [16, 16, 16]},
            dataset={'n_subjects': 3, 'drfs': [4, 100]}
        )
        out = self.root / 'phantom_run'
        stdout = self.call('phantom_gen', config=config, out=str(out))

        self.assertEqual(len(list(out.glob('*/*.vol'))), 9)
        manifest = DatasetManifest.load(out)
        self.assertEqual(manifest.drfs(), [4, 100])
        self.assertEqual(sorted(manifest.split.values()), ['test', 'train', 'val'])
        self.assertIn('Generated 3 subjects', stdout)

        run = json.loads((out / 'run.json').read_text())
        self.assertEqual(run['status'], ExperimentRun.STATUS_FINISHED)
        self.assertEqual(run['summary']['subjects'], 3)
        self.assertEqual(json.loads((out / 'config.json').read_text())['dataset']['seed'], 2)
        self.assertTrue(ExperimentRun.objects.for_command('phantom_gen').finished().exists())

    def test_seed_flag_changes_the_data(self):
        config = self.write_config('phantom', phantom={'shape': [16, 16, 16]}, dataset={'n_subjects': 3, 'drfs': [4]})
        first, second = self.root / 'seed_a', self.root / 'seed_b'
        self.call('phantom_gen', config=config, out=str(first), seed=1)
        self.call('phantom_gen', config=config, out=str(second), seed=2)
        self.assertNotEqual(
            (first / 'sub-000' / 'full.vol').read_bytes(),
            (second / 'sub-000' / 'full.vol').read_bytes()
        )

    def test_default_run_dir_lives_in_the_cache(self):
        config = self.write_config('phantom', phantom={'shape': [16, 16, 16]}, dataset={'n_subjects': 3, 'drfs': [4]})
        with override_settings(AEGAN={'RECORD_RUNS': False, 'CACHE_DIR': str(self.root / 'cache')}):
            self.call('phantom_gen', config=config)
        runs = list((self.root / 'cache' / 'phantom_gen').iterdir())
        self.assertEqual(len(runs), 1)
        self.assertEqual(json.loads((runs[0] / 'run.json').read_text())['status'], 'finished')
        self.assertFalse(ExperimentRun.objects.exists())


class TrainCommandTestCase(CommandTestCase):

    def test_train_writes_checkpoint_and_logs(self):
        out = self.train_model('train_full')
        self.assertTrue((out / 'model.pt').exists())
        self.assertEqual(
            header(out / 'train_log.csv'),
            ['epoch', 'lr', 'L_content', 'L_residual', 'd_loss', 'g_loss', 'val_loss', 'val_psnr']
        )
        self.assertEqual(header(out / 'steps.csv'), ['step', 'd_loss', 'g_loss', 'L_content', 'L_residual', 'total'])
        summary = json.loads((out / 'run.json').read_text())['summary']
        self.assertEqual(summary['steps'], 2)
        self.assertEqual(summary['drfs'], [4, 100])

    def test_pix_ablation_drops_the_second_stage_columns(self):
        config = self.write_config('ablate', manifest=self.manifest, train=TINY_TRAIN, ablation='full')
        out = self.root / 'ablate_pix'
        self.call('ablate', config=config, out=str(out), ablation='pix')

        columns = header(out / 'steps.csv')
        self.assertNotIn('d_loss', columns)
        self.assertNotIn('L_residual', columns)
        self.assertEqual(json.loads((out / 'config.json').read_text())['ablation'], 'pix')

    def test_cross_validation(self):
        out = self.train_model('train_cv', cv_folds=2, steps_per_epoch=1)
        folds = json.loads((out / 'folds.json').read_text())
        self.assertEqual(len(folds), 2)
        self.assertTrue((out / 'steps_fold2.csv').exists())

    def test_pretrain_then_warm_start(self):
        config = self.write_config('pretrain', manifest=self.manifest, ssp={
            'patch_shape': [8, 8, 8],
            'depth_strides': TINY_TRAIN['depth_strides'],
            'base_channels': 2,
            'batch_size': 2,
            'max_steps': 2,
            'log_every': 1,
            'tasks': ['rotation', 'restoration'],
        })
        out = self.root / 'pretrain'
        self.call('pretrain', config=config, out=str(out))
        self.assertEqual(header(out / 'ssp_log.csv'), ['step', 'L_rot', 'L_Res', 'total'])

        warm = self.train_model('train_warm', pretrained_encoder=str(out / 'encoder.pt'))
        self.assertTrue((warm / 'model.pt').exists())


class EvalAndPlotCommandTestCase(CommandTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model_dir = cls.root / 'model'
        config = cls.root / 'model.json'
        config.write_text(json.dumps({'schema_version': 1, 'manifest': cls.manifest, 'train': TINY_TRAIN}))
        call_command('train', config=str(config), out=str(cls.model_dir), stdout=StringIO())

    def evaluate(self, name, **eval_block):
        config = self.write_config(
            name,
            manifest=self.manifest,
            checkpoint=str(self.model_dir / 'model.pt'),
            eval=eval_block
        )
        out = self.root / name
        stdout = self.call('eval', config=config, out=str(out))
        return out, stdout

    def test_eval_writes_the_report(self):
        out, stdout = self.evaluate('eval_run', label='tiny')
        report = MetricsReport.load(out / 'metrics.json')
        self.assertEqual(sorted(report.per_drf), [4, 100])
        self.assertEqual(report.label, 'tiny')
        self.assertEqual(report.scanner_profiles, {'eval': 'A', 'train': 'A'})
        self.assertIsNotNone(report.roi)
        self.assertEqual(header(out / 'metrics.csv'), ['subject', 'drf', 'source', 'psnr', 'ssim', 'nrmse'])
        self.assertIn('DRF   4', stdout)

        run = ExperimentRun.objects.for_command('eval').get()
        self.assertEqual(run.metrics.count(), 4)
        self.assertEqual(MetricRecord.objects.filter(source='low_dose').count(), 2)

    def test_eval_compares_with_an_earlier_run(self):
        first, _ = self.evaluate('eval_first', drfs=[100])
        with self.assertRaises(CommandError) as ctx:
            # one shared (subject, DRF) pair is not enough for a paired test
            self.evaluate('eval_second', drfs=[100], compare_with=str(first / 'metrics.csv'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_plot_renders_the_charts(self):
        out, _ = self.evaluate('eval_for_plot')
        charts = self.root / 'charts'
        stdout = self.call('plot', str(out / 'metrics.json'), out=str(charts))
        self.assertTrue((charts / 'metrics_by_drf.png').exists())
        self.assertTrue((charts / 'weighted_scores.png').exists())
        self.assertFalse((charts / 'ssp_comparison.png').exists())
        self.assertIn('weighted_scores.png', stdout)

        second = self.root / 'charts_two'
        self.call('plot', str(out), str(out / 'metrics.json'), out=str(second))
        self.assertTrue((second / 'ssp_comparison.png').exists())


class ExitCodeTestCase(CommandTestCase):

    def assertExitCode(self, code, command, *args, **kwargs):
        with self.assertRaises(CommandError) as ctx:
            self.call(command, *args, **kwargs)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception

    def test_configuration_errors(self):
        self.assertExitCode(2, 'train', config=str(self.root / 'missing.json'), out=str(self.root / 'x'))

        config = self.write_config('bad', manifest=self.manifest, train=dict(TINY_TRAIN, colour='red'))
        error = self.assertExitCode(2, 'train', config=config, out=str(self.root / 'bad'))
        self.assertIn('train.colour', str(error))

    def test_plot_without_reports(self):
        self.assertExitCode(2, 'plot', out=str(self.root / 'empty_plot'))

    def test_data_errors_mark_the_run_failed(self):
        config = self.write_config('lost', manifest=str(self.root / 'nowhere'), train=TINY_TRAIN)
        out = self.root / 'lost'
        self.assertExitCode(3, 'train', config=config, out=str(out))

        run = json.loads((out / 'run.json').read_text())
        self.assertEqual(run['status'], ExperimentRun.STATUS_FAILED)
        self.assertIn('does not exist', run['error'])
        self.assertEqual(ExperimentRun.objects.get().status, ExperimentRun.STATUS_FAILED)

    def test_missing_report(self):
        self.assertExitCode(3, 'plot', str(self.root / 'nothing.json'), out=str(self.root / 'no_plot'))

    @mock.patch(
        'django_aegan.management.commands.phantom_gen.build_dataset',
        side_effect=OSError('No space left on device')
    )
    def test_io_errors_mark_the_run_failed(self, build):
        config = self.write_config('full_disk', phantom={'shape': [16, 16, 16]}, dataset={'n_subjects': 3})
        out = self.root / 'full_disk'
        error = self.assertExitCode(3, 'phantom_gen', config=config, out=str(out))
        self.assertIn('No space left', str(error))
        build.assert_called_once()

        run = json.loads((out / 'run.json').read_text())
        self.assertEqual(run['status'], ExperimentRun.STATUS_FAILED)
        self.assertEqual(ExperimentRun.objects.get().status, ExperimentRun.STATUS_FAILED)
