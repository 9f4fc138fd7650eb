import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from django_aegan.evaluation import ORDERING_EQUATION
from django_aegan.exceptions import ConfigurationError, SchemaError
from django_aegan.phantoms import PhantomSpec
from django_aegan.serializers import (
    COMMAND_ABLATE,
    COMMAND_EVAL,
    COMMAND_PHANTOM_GEN,
    COMMAND_PLOT,
    COMMAND_PRETRAIN,
    COMMAND_TRAIN,
    flatten_errors,
    load_config,
    validate_config,
)
from django_aegan.training import RESIDUAL_NONE


PHANTOM_CONFIG = {
    'schema_version': 1,
    'seed': 9,
    'phantom': {
        'shape': [16, 16, 16],
        'scanner_profile': 'B',
        'lesions': [{'center': [10, 10, 10], 'radius': 2, 'suv': 8}],
    },
    'dataset': {'n_subjects': 3, 'drfs': [100, 4]},
}

TRAIN_CONFIG = {
    'schema_version': 1,
    'seed': 4,
    'manifest': 'data/manifest.json',
    'train': {
        'patch_shape': [8, 8, 8],
        'stride': [4, 4, 4],
        'depth_strides': [[2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 1, 1], [1, 1, 1]],
        'base_channels': 2,
        'drf_mix': '10-100',
    },
}


def with_block(config, key, **changes):
    data = json.loads(json.dumps(config))
    data[key].update(changes)
    return data


class ValidateConfigTestCase(SimpleTestCase):

    def assertSchemaError(self, data, command, path):
        with self.assertRaises(SchemaError) as ctx:
            validate_config(data, command)
        self.assertEqual(ctx.exception.path, path)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_phantom_config(self):
        config = validate_config(PHANTOM_CONFIG, COMMAND_PHANTOM_GEN)
        self.assertIsInstance(config.phantom, PhantomSpec)
        self.assertEqual(config.phantom.spacing, (1.667, 1.667, 2.886))
        self.assertEqual(config.phantom.counts_per_suv, 250.0)
        self.assertEqual(config.dataset['drfs'], [4, 100])
        self.assertEqual(config.dataset['seed'], 9)
        self.assertEqual(config.dataset['ratios'], [0.8, 0.1, 0.1])

    def test_missing_key_is_named(self):
        data = json.loads(json.dumps(PHANTOM_CONFIG))
        del data['phantom']['shape']
        self.assertSchemaError(data, COMMAND_PHANTOM_GEN, 'phantom.shape')

    def test_unknown_keys_are_rejected(self):
        self.assertSchemaError(with_block(PHANTOM_CONFIG, 'phantom', colour='red'), COMMAND_PHANTOM_GEN, 'phantom.colour')
        self.assertSchemaError(dict(PHANTOM_CONFIG, extra=1), COMMAND_PHANTOM_GEN, 'extra')

    def test_nested_errors_carry_the_index(self):
        data = with_block(PHANTOM_CONFIG, 'phantom', lesions=[{'center': [1, 1], 'radius': 2, 'suv': 1}])
        self.assertSchemaError(data, COMMAND_PHANTOM_GEN, 'phantom.lesions.0.center')

    def test_domain_errors_name_the_block(self):
        data = with_block(PHANTOM_CONFIG, 'phantom', lesions=[{'center': [1, 1, 1], 'radius': 5, 'suv': 1}])
        self.assertSchemaError(data, COMMAND_PHANTOM_GEN, 'phantom')
        self.assertSchemaError(with_block(TRAIN_CONFIG, 'train', stride=[9, 4, 4]), COMMAND_TRAIN, 'train')

    def test_field_checks(self):
        self.assertSchemaError(with_block(PHANTOM_CONFIG, 'dataset', ratios=[0.5, 0.3, 0.3]), COMMAND_PHANTOM_GEN, 'dataset.ratios')
        self.assertSchemaError(with_block(PHANTOM_CONFIG, 'dataset', n_subjects=2), COMMAND_PHANTOM_GEN, 'dataset.n_subjects')
        self.assertSchemaError(with_block(PHANTOM_CONFIG, 'dataset', drfs=[3]), COMMAND_PHANTOM_GEN, 'dataset.drfs.0')
        self.assertSchemaError(with_block(TRAIN_CONFIG, 'train', drf_mix='4-50'), COMMAND_TRAIN, 'train.drf_mix')
        self.assertSchemaError(with_block(TRAIN_CONFIG, 'train', drf_mix=[4, 7]), COMMAND_TRAIN, 'train.drf_mix')
        self.assertSchemaError(dict(TRAIN_CONFIG, schema_version=2), COMMAND_TRAIN, 'schema_version')

    def test_required_blocks(self):
        self.assertSchemaError({'schema_version': 1, 'manifest': 'm.json'}, COMMAND_TRAIN, 'train')
        self.assertSchemaError(dict(TRAIN_CONFIG), COMMAND_ABLATE, 'ablation')
        self.assertSchemaError({'schema_version': 1, 'manifest': 'm.json'}, COMMAND_EVAL, 'checkpoint')
        self.assertSchemaError({}, COMMAND_PLOT, 'schema_version')
        self.assertSchemaError([], COMMAND_PLOT, '$')

    def test_seed_flows_into_blocks(self):
        config = validate_config(TRAIN_CONFIG, COMMAND_TRAIN)
        self.assertEqual(config.train.seed, 4)
        explicit = validate_config(with_block(TRAIN_CONFIG, 'train', seed=11), COMMAND_TRAIN)
        self.assertEqual(explicit.train.seed, 11)

    def test_ablation_is_applied(self):
        config = validate_config(dict(TRAIN_CONFIG, ablation='pix'), COMMAND_ABLATE)
        self.assertEqual(config.train.residual_mode, RESIDUAL_NONE)
        self.assertFalse(config.train.use_discriminator)

    def test_pretrain_block(self):
        data = {
            'schema_version': 1,
            'manifest': 'm.json',
            'ssp': {'tasks': ['cpc', 'rotation'], 'patch_shape': [32, 32, 16]},
        }
        config = validate_config(data, COMMAND_PRETRAIN)
        self.assertEqual(config.ssp.tasks, ('rotation', 'cpc'))
        self.assertEqual(config.ssp.seed, 0)
        data['ssp']['patch_shape'] = [32, 16, 16]
        self.assertSchemaError(data, COMMAND_PRETRAIN, 'ssp')

    def test_eval_block(self):
        data = {
            'schema_version': 1,
            'manifest': 'm.json',
            'checkpoint': 'model.pt',
            'eval': {'drfs': [100, 4], 'ordering': ORDERING_EQUATION},
        }
        config = validate_config(data, COMMAND_EVAL)
        self.assertEqual(config.eval.drfs, (4, 100))
        self.assertEqual(config.eval.ordering, ORDERING_EQUATION)

        folds_only = {'schema_version': 1, 'manifest': 'm.json', 'eval': {'folds': 'cv/folds.json'}}
        self.assertEqual(validate_config(folds_only, COMMAND_EVAL).eval.folds, 'cv/folds.json')

    @override_settings(AEGAN={'PATCH_SHAPE': (64, 64, 32), 'PATCH_STRIDE': (32, 32, 16)})
    def test_defaults_come_from_settings(self):
        data = {'schema_version': 1, 'manifest': 'm.json', 'train': {'base_channels': 2}}
        config = validate_config(data, COMMAND_TRAIN)
        self.assertEqual(config.train.patch_shape, (64, 64, 32))
        self.assertEqual(config.train.stride, (32, 32, 16))

    def test_echo_reloads_to_the_same_config(self):
        cases = (
            (PHANTOM_CONFIG, COMMAND_PHANTOM_GEN),
            (TRAIN_CONFIG, COMMAND_TRAIN),
            (dict(TRAIN_CONFIG, ablation='ar'), COMMAND_ABLATE),
        )
        for data, command in cases:
            echo = validate_config(data, command).to_dict()
            self.assertEqual(validate_config(json.loads(json.dumps(echo)), command).to_dict(), echo)


class LoadConfigTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_overrides_replace_top_level_keys(self):
        path = self.root / 'config.json'
        path.write_text(json.dumps(TRAIN_CONFIG))
        self.assertEqual(load_config(path, COMMAND_TRAIN, {'seed': 21}).train.seed, 21)

    def test_unreadable_files(self):
        with self.assertRaises(ConfigurationError):
            load_config(self.root / 'missing.json', COMMAND_TRAIN)

        path = self.root / 'broken.json'
        path.write_text('{"schema_version": 1,')
        with self.assertRaises(SchemaError) as ctx:
            load_config(path, COMMAND_TRAIN)
        self.assertEqual(ctx.exception.path, '$')


class FlattenErrorsTestCase(SimpleTestCase):

    def test_paths(self):
        detail = {
            'phantom': {'lesions': [{}, {'radius': ['Too small.']}], 'non_field_errors': ['Bad block.']},
            'non_field_errors': ['Bad root.'],
        }
        self.assertEqual(flatten_errors(detail), [
            ('phantom.lesions.1.radius', 'Too small.'),
            ('phantom', 'Bad block.'),
            ('$', 'Bad root.'),
        ])
        self.assertEqual(flatten_errors('oops'), [('$', 'oops')])


class SampleConfigTestCase(SimpleTestCase):
    configs = Path(__file__).resolve().parents[2] / 'test_project' / 'configs'

    def test_shipped_configs_validate(self):
        for name, command in (
            ('phantoms.json', COMMAND_PHANTOM_GEN),
            ('pretrain.json', COMMAND_PRETRAIN),
            ('train.json', COMMAND_TRAIN),
            ('eval.json', COMMAND_EVAL),
        ):
            with self.subTest(name=name):
                config = load_config(self.configs / name, command)
                self.assertTrue(config.out.startswith('runs/'))

        train = load_config(self.configs / 'train.json', COMMAND_TRAIN).train
        ssp = load_config(self.configs / 'pretrain.json', COMMAND_PRETRAIN).ssp
        self.assertEqual(train.base_channels, ssp.base_channels)
        self.assertEqual([int(d) for d in train.drfs], [4, 10, 20, 50, 100])
