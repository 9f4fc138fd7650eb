"""
JSON schemas of the experiment configuration files and of the run echo.

Every block is a DRF serializer that rejects unknown keys and whose
`create()` builds the plain domain object the computational modules use.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from rest_framework import serializers
from rest_framework.exceptions import ValidationError
from rest_framework.settings import api_settings

from django_aegan.conf import aegan_settings
from django_aegan.evaluation import ORDERING_TABLES, WEIGHT_ORDERINGS, EvalOptions
from django_aegan.exceptions import ArgumentError, ConfigurationError, SchemaError
from django_aegan.models import ExperimentRun
from django_aegan.phantoms import SCANNER_PROFILES, Ellipsoid, Lesion, PhantomSpec
from django_aegan.pretraining import TASKS, SSPConfig
from django_aegan.training import ABLATIONS, DRF_MIX_PRESETS, RESIDUAL_MODES, TrainConfig
from django_aegan.volumes import REDUCED_DOSE_LEVELS, SPLIT_NAMES, PathLike


SCHEMA_VERSION = 1

COMMAND_PHANTOM_GEN = 'phantom_gen'
COMMAND_PRETRAIN = 'pretrain'
COMMAND_TRAIN = 'train'
COMMAND_ABLATE = 'ablate'
COMMAND_EVAL = 'eval'
COMMAND_PLOT = 'plot'

REQUIRED_BLOCKS = {
    COMMAND_PHANTOM_GEN: ('phantom', 'dataset'),
    COMMAND_PRETRAIN: ('manifest', 'ssp'),
    COMMAND_TRAIN: ('manifest', 'train'),
    COMMAND_ABLATE: ('manifest', 'train', 'ablation'),
    COMMAND_EVAL: ('manifest',),
    COMMAND_PLOT: (),
}

DRF_CHOICES = [int(d) for d in REDUCED_DOSE_LEVELS]


def _triple(child: serializers.Field, **kwargs) -> serializers.ListField:
    return serializers.ListField(child=child, min_length=3, max_length=3, **kwargs)


def _positive_triple(**kwargs) -> serializers.ListField:
    return _triple(serializers.IntegerField(min_value=1), **kwargs)


class StrictSerializerMixin:
    """
    Fails on keys the serializer does not declare instead of silently
    dropping them.
    """

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise ValidationError({key: ['Unknown key.'] for key in unknown}, code='unknown')
        return super().to_internal_value(data)


class DomainSerializer(StrictSerializerMixin, serializers.Serializer):
    """
    Block whose validated data builds a domain object. Errors raised by the
    object's own `clean()` are reported on the block itself.
    """

    def build(self, attrs: Dict) -> Any:
        raise NotImplementedError

    def validate(self, attrs) -> Dict:
        try:
            self.build(dict(attrs))
        except (ConfigurationError, ArgumentError) as e:
            raise ValidationError(str(e), code='invalid')
        return super().validate(attrs)

    def create(self, validated_data) -> Any:
        return self.build(dict(validated_data))


class OrganSerializer(StrictSerializerMixin, serializers.Serializer):
    center = _triple(serializers.FloatField())
    radii = _triple(serializers.FloatField(min_value=0))
    suv = serializers.FloatField(min_value=0)
    name = serializers.CharField(default='organ')


class LesionSerializer(StrictSerializerMixin, serializers.Serializer):
    center = _triple(serializers.FloatField())
    radius = serializers.FloatField(min_value=0)
    suv = serializers.FloatField(min_value=0)


class PhantomTemplateSerializer(DomainSerializer):
    shape = _positive_triple()
    scanner_profile = serializers.ChoiceField(choices=sorted(SCANNER_PROFILES), default='A')
    spacing = _triple(serializers.FloatField(), required=False)
    counts_per_suv = serializers.FloatField(required=False)
    background_suv = serializers.FloatField(default=1.0)
    texture = serializers.FloatField(default=0.0)
    organs = OrganSerializer(many=True, default=list)
    lesions = LesionSerializer(many=True, default=list)

    def build(self, attrs: Dict) -> PhantomSpec:
        attrs['organs'] = [
            Ellipsoid(center=tuple(o['center']), radii=tuple(o['radii']), suv=o['suv'], name=o['name'])
            for o in attrs.get('organs', [])
        ]
        attrs['lesions'] = [
            Lesion(center=tuple(item['center']), radius=item['radius'], suv=item['suv'])
            for item in attrs.get('lesions', [])
        ]
        if 'spacing' in attrs:
            attrs['spacing'] = tuple(attrs['spacing'])
        shape = attrs.pop('shape')
        profile = attrs.pop('scanner_profile')
        return PhantomSpec.for_profile(shape, profile, **attrs)


class DatasetSerializer(DomainSerializer):
    n_subjects = serializers.IntegerField(min_value=3)
    drfs = serializers.ListField(
        child=serializers.ChoiceField(choices=DRF_CHOICES),
        min_length=1,
        default=lambda: list(DRF_CHOICES)
    )
    ratios = _triple(serializers.FloatField(min_value=0), default=lambda: [0.8, 0.1, 0.1])
    volume_format = serializers.ChoiceField(
        choices=('raw', 'nifti'),
        default=lambda: aegan_settings.VOLUME_FORMAT
    )
    workers = serializers.IntegerField(min_value=1, default=1)
    seed = serializers.IntegerField(required=False)

    def validate_ratios(self, value: List[float]) -> List[float]:
        if abs(sum(value) - 1.0) > 1e-6:
            raise ValidationError('Split ratios must sum to 1, got {}.'.format(value))
        return value

    def build(self, attrs: Dict) -> Dict:
        attrs['drfs'] = sorted({int(d) for d in attrs['drfs']})
        return attrs


class DrfMixField(serializers.Field):
    """
    Either a preset name such as `"10-100"` or an explicit list of DRFs.
    """
    default_error_messages = {
        'preset': 'Unknown DRF mix preset "{value}"; choose one of {choices}.',
        'invalid': 'Expected a preset name or a list of DRFs.',
        'drf': 'DRF {value} is not one of {choices}.',
    }

    def to_internal_value(self, data):
        if isinstance(data, str):
            if data not in DRF_MIX_PRESETS:
                self.fail('preset', value=data, choices=sorted(DRF_MIX_PRESETS))
            return data
        if not isinstance(data, list) or not data:
            self.fail('invalid')
        for value in data:
            if isinstance(value, bool) or value not in DRF_CHOICES:
                self.fail('drf', value=value, choices=DRF_CHOICES)
        return tuple(sorted(set(data)))

    def to_representation(self, value):
        return value if isinstance(value, str) else list(value)


class SSPConfigSerializer(DomainSerializer):
    lambdas = serializers.ListField(
        child=serializers.FloatField(min_value=0),
        min_length=4,
        max_length=4,
        default=lambda: [1.0, 1.0, 1.0, 1.0]
    )
    sigma = serializers.FloatField(default=SSPConfig.sigma)
    dropout_fraction = serializers.FloatField(default=SSPConfig.dropout_fraction)
    batch_size = serializers.IntegerField(min_value=1, default=SSPConfig.batch_size)
    lr = serializers.FloatField(default=SSPConfig.lr)
    weight_decay = serializers.FloatField(min_value=0, default=SSPConfig.weight_decay)
    epochs = serializers.IntegerField(min_value=1, default=SSPConfig.epochs)
    max_steps = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    seed = serializers.IntegerField(required=False)
    tasks = serializers.ListField(
        child=serializers.ChoiceField(choices=TASKS),
        min_length=1,
        default=lambda: list(TASKS)
    )
    log_every = serializers.IntegerField(min_value=1, default=SSPConfig.log_every)
    device = serializers.CharField(default=SSPConfig.device)
    patch_shape = _positive_triple(default=lambda: list(aegan_settings.PATCH_SHAPE))
    patches_per_volume = serializers.IntegerField(min_value=1, default=SSPConfig.patches_per_volume)
    base_channels = serializers.IntegerField(min_value=1, default=SSPConfig.base_channels)
    depth_strides = serializers.ListField(
        child=_positive_triple(),
        allow_null=True,
        default=None
    )
    suv_scale = serializers.FloatField(default=lambda: aegan_settings.SUV_SCALE)

    def validate_tasks(self, value: List[str]) -> List[str]:
        # keep the canonical task order whatever the file lists
        return [task for task in TASKS if task in value]

    def build(self, attrs: Dict) -> SSPConfig:
        cfg = SSPConfig(**attrs)
        cfg.encoder_spec()
        return cfg


class TrainConfigSerializer(DomainSerializer):
    lambda_content = serializers.FloatField(min_value=0, default=TrainConfig.lambda_content)
    lambda_residual = serializers.FloatField(min_value=0, default=TrainConfig.lambda_residual)
    lambda_adversarial = serializers.FloatField(min_value=0, default=TrainConfig.lambda_adversarial)
    residual_mode = serializers.ChoiceField(choices=RESIDUAL_MODES, default=TrainConfig.residual_mode)
    use_discriminator = serializers.BooleanField(default=TrainConfig.use_discriminator)
    lr0 = serializers.FloatField(default=TrainConfig.lr0)
    lr_decay_factor = serializers.FloatField(default=TrainConfig.lr_decay_factor)
    lr_patience_epochs = serializers.IntegerField(min_value=1, default=TrainConfig.lr_patience_epochs)
    lr_stop_threshold = serializers.FloatField(default=TrainConfig.lr_stop_threshold)
    max_epochs = serializers.IntegerField(min_value=1, default=TrainConfig.max_epochs)
    batch_size = serializers.IntegerField(min_value=1, default=TrainConfig.batch_size)
    drf_mix = DrfMixField(default=TrainConfig.drf_mix)
    pretrained_encoder = serializers.CharField(allow_null=True, default=None)
    seed = serializers.IntegerField(required=False)
    patch_shape = _positive_triple(default=lambda: list(aegan_settings.PATCH_SHAPE))
    stride = _positive_triple(default=lambda: list(aegan_settings.PATCH_STRIDE))
    base_channels = serializers.IntegerField(min_value=1, default=TrainConfig.base_channels)
    depth_strides = serializers.ListField(
        child=_positive_triple(),
        allow_null=True,
        default=None
    )
    steps_per_epoch = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    max_steps = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    suv_scale = serializers.FloatField(default=lambda: aegan_settings.SUV_SCALE)
    deterministic = serializers.BooleanField(default=TrainConfig.deterministic)
    disc_output = serializers.ChoiceField(choices=('mean', 'map'), default=TrainConfig.disc_output)
    cv_folds = serializers.IntegerField(min_value=2, allow_null=True, default=None)
    val_patches = serializers.IntegerField(min_value=1, default=TrainConfig.val_patches)
    device = serializers.CharField(default=TrainConfig.device)

    def build(self, attrs: Dict) -> TrainConfig:
        cfg = TrainConfig(**attrs)
        cfg.network_specs()
        return cfg


class EvalOptionsSerializer(DomainSerializer):
    split = serializers.ChoiceField(choices=SPLIT_NAMES, default=EvalOptions.split)
    drfs = serializers.ListField(
        child=serializers.ChoiceField(choices=DRF_CHOICES),
        min_length=1,
        allow_null=True,
        default=None
    )
    with_roi = serializers.BooleanField(default=EvalOptions.with_roi)
    ordering = serializers.ChoiceField(choices=sorted(WEIGHT_ORDERINGS), default=ORDERING_TABLES)
    label = serializers.CharField(allow_blank=True, default='')
    compare_with = serializers.CharField(allow_null=True, default=None)
    folds = serializers.CharField(allow_null=True, default=None)
    baseline_folds = serializers.CharField(allow_null=True, default=None)

    def build(self, attrs: Dict) -> EvalOptions:
        return EvalOptions(**attrs)


@dataclass
class ExperimentConfig:
    command: str
    seed: int = 0
    out: Optional[str] = None
    phantom: Optional[PhantomSpec] = None
    dataset: Optional[Dict] = None
    manifest: Optional[str] = None
    ssp: Optional[SSPConfig] = None
    train: Optional[TrainConfig] = None
    ablation: Optional[str] = None
    checkpoint: Optional[str] = None
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> Dict:
        """
        Fully-resolved echo; loading it back yields the same config.
        """
        data: Dict[str, Any] = {'schema_version': SCHEMA_VERSION, 'seed': self.seed}
        if self.out is not None:
            data['out'] = self.out
        if self.phantom is not None:
            data['phantom'] = json.loads(json.dumps(asdict(self.phantom)))
        if self.dataset is not None:
            data['dataset'] = dict(self.dataset)
        for key in ('manifest', 'ablation', 'checkpoint'):
            if getattr(self, key) is not None:
                data[key] = getattr(self, key)
        if self.ssp is not None:
            data['ssp'] = self.ssp.to_dict()
        if self.train is not None:
            data['train'] = self.train.to_dict()
        data['eval'] = self.eval.to_dict()
        return data


class ExperimentConfigSerializer(StrictSerializerMixin, serializers.Serializer):
    schema_version = serializers.IntegerField()
    seed = serializers.IntegerField(default=0)
    out = serializers.CharField(required=False)
    phantom = PhantomTemplateSerializer(required=False)
    dataset = DatasetSerializer(required=False)
    manifest = serializers.CharField(required=False)
    ssp = SSPConfigSerializer(required=False)
    train = TrainConfigSerializer(required=False)
    ablation = serializers.ChoiceField(choices=sorted(ABLATIONS), required=False)
    checkpoint = serializers.CharField(required=False)
    eval = EvalOptionsSerializer(required=False)

    def validate_schema_version(self, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValidationError('Unsupported schema version {}; expected {}.'.format(value, SCHEMA_VERSION))
        return value

    def validate(self, attrs) -> Dict:
        command = self.context.get('command')
        missing = [key for key in REQUIRED_BLOCKS.get(command, ()) if key not in attrs]
        if missing:
            raise ValidationError(
                {key: ['This block is required by {}.'.format(command)] for key in missing},
                code='required'
            )
        if command == COMMAND_EVAL and 'checkpoint' not in attrs and not (attrs.get('eval') or {}).get('folds'):
            raise ValidationError({'checkpoint': ['eval needs a checkpoint or eval.folds.']}, code='required')
        return attrs

    def create(self, validated_data) -> ExperimentConfig:
        seed = validated_data['seed']
        blocks = {}
        for key in ('phantom', 'dataset', 'ssp', 'train', 'eval'):
            if key not in validated_data:
                continue
            attrs = dict(validated_data[key])
            if key in ('dataset', 'ssp', 'train'):
                attrs.setdefault('seed', seed)
            blocks[key] = self.fields[key].create(attrs)

        train = blocks.get('train')
        ablation = validated_data.get('ablation')
        if train is not None and ablation:
            train = train.with_ablation(ablation)

        return ExperimentConfig(
            command=self.context.get('command', ''),
            seed=seed,
            out=validated_data.get('out'),
            phantom=blocks.get('phantom'),
            dataset=blocks.get('dataset'),
            manifest=validated_data.get('manifest'),
            ssp=blocks.get('ssp'),
            train=train,
            ablation=ablation,
            checkpoint=validated_data.get('checkpoint'),
            eval=blocks.get('eval') or EvalOptions()
        )


def flatten_errors(detail, prefix: str = '') -> List[Tuple[str, str]]:
    """
    Turns nested DRF error details into `(dotted path, message)` pairs,
    e.g. `('phantom.shape', 'This field is required.')`. Errors on a whole
    block carry the block's path; errors on the root carry `'$'`.
    """
    if isinstance(detail, Mapping):
        pairs = []
        for key, value in detail.items():
            if key == api_settings.NON_FIELD_ERRORS_KEY:
                path = prefix
            else:
                path = '{}.{}'.format(prefix, key) if prefix else str(key)
            pairs += flatten_errors(value, path)
        return pairs

    if isinstance(detail, list):
        if all(isinstance(item, str) for item in detail):
            return [(prefix or '$', str(item)) for item in detail]
        pairs = []
        for index, item in enumerate(detail):
            pairs += flatten_errors(item, '{}.{}'.format(prefix, index) if prefix else str(index))
        return pairs

    return [(prefix or '$', str(detail))]


def validate_config(data, command: str) -> ExperimentConfig:
    """
    Validates a parsed config file for `command`; raises `SchemaError`
    naming the first offending key.
    """
    if not isinstance(data, Mapping):
        raise SchemaError('$', 'A config must be a JSON object.')

    serializer = ExperimentConfigSerializer(data=data, context={'command': command})
    if not serializer.is_valid():
        path, message = flatten_errors(serializer.errors)[0]
        raise SchemaError(path, message)
    return serializer.save()


def load_config(path: PathLike, command: str, overrides: Optional[Dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise ConfigurationError('Config file {} does not exist.'.format(path))
    except json.JSONDecodeError as e:
        raise SchemaError('$', 'Invalid JSON at line {} column {}: {}'.format(e.lineno, e.colno, e.msg))

    if overrides and isinstance(data, dict):
        data.update(overrides)
    return validate_config(data, command)


class ExperimentRunSerializer(serializers.ModelSerializer):

    class Meta:
        model = ExperimentRun
        fields = (
            'id',
            'command',
            'status',
            'seed',
            'run_dir',
            'config',
            'summary',
            'error',
            'created_at',
            'finished_at',
        )
        read_only_fields = fields
