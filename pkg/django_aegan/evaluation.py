"""
Image-quality metrics, the weighted dose-reduction score, ROI SUV
analysis and the statistics used to compare runs.

PSNR peak and NRMSE normalizer are both the range (max - min) of the
reference volume.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from skimage.metrics import normalized_root_mse, peak_signal_noise_ratio, structural_similarity

from django_aegan.exceptions import (
    ArgumentError,
    ConfigurationError,
    DegenerateStatisticError,
    GeometryError,
    ResolutionError,
    UndefinedMetricError,
)
from django_aegan.volumes import SPLIT_NAMES, SPLIT_TEST, DatasetManifest, DoseLevel, PathLike, Volume, load_volume


logger = logging.getLogger(__name__)

ArrayLike = Union[Volume, np.ndarray]

METRICS = ('psnr', 'ssim', 'nrmse')
SSIM_WINDOW = 7

ORDERING_EQUATION = 'as_equation'
ORDERING_TABLES = 'as_tables'
WEIGHTS = (0.35, 0.25, 0.20, 0.15, 0.05)
WEIGHT_ORDERINGS = {
    ORDERING_EQUATION: (100, 50, 20, 10, 4),
    ORDERING_TABLES: (4, 10, 20, 50, 100),
}

SOURCE_MODEL = 'model'
SOURCE_LOW_DOSE = 'low_dose'

ROI_DIAMETER_RANGE = (19.0, 21.0)

DEFINITIONS = {
    'psnr_peak': 'max(ref) - min(ref)',
    'nrmse_normalizer': 'max(ref) - min(ref)',
    'ssim_window': 'uniform {0}x{0}x{0}, K1=0.01, K2=0.03'.format(SSIM_WINDOW),
}


def _pair(ref: ArrayLike, pred: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(getattr(ref, 'voxels', ref), dtype=np.float64)
    pred = np.asarray(getattr(pred, 'voxels', pred), dtype=np.float64)
    if ref.shape != pred.shape:
        raise ArgumentError('Cannot compare shapes {} and {}.'.format(ref.shape, pred.shape))
    return ref, pred


def _range(ref: np.ndarray, metric: str) -> float:
    span = float(ref.max() - ref.min())
    if span <= 0:
        raise UndefinedMetricError('{} is undefined for a reference with zero range.'.format(metric))
    return span


def psnr(ref: ArrayLike, pred: ArrayLike) -> float:
    """
    Returns `math.inf` for identical inputs.
    """
    ref, pred = _pair(ref, pred)
    span = _range(ref, 'PSNR')
    if np.array_equal(ref, pred):
        return math.inf
    return float(peak_signal_noise_ratio(ref, pred, data_range=span))


def ssim(ref: ArrayLike, pred: ArrayLike, data_range: Optional[float] = None) -> float:
    ref, pred = _pair(ref, pred)
    if ref.ndim != 3 or min(ref.shape) < SSIM_WINDOW:
        raise ArgumentError('SSIM needs a 3D volume of at least {} voxels per axis, got {}.'.format(
            SSIM_WINDOW, ref.shape
        ))
    span = data_range if data_range is not None else _range(ref, 'SSIM')
    return float(structural_similarity(
        ref, pred,
        win_size=SSIM_WINDOW,
        data_range=span,
        gaussian_weights=False,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03
    ))


def nrmse(ref: ArrayLike, pred: ArrayLike) -> float:
    """
    Root mean squared error in percent of the reference range.
    """
    ref, pred = _pair(ref, pred)
    _range(ref, 'NRMSE')
    return 100.0 * float(normalized_root_mse(ref, pred, normalization='min-max'))


def image_metrics(ref: ArrayLike, pred: ArrayLike) -> Dict[str, float]:
    return {'psnr': psnr(ref, pred), 'ssim': ssim(ref, pred), 'nrmse': nrmse(ref, pred)}


def weighted_score(per_drf: Mapping, ordering: str = ORDERING_TABLES) -> float:
    if ordering not in WEIGHT_ORDERINGS:
        raise ArgumentError('Unknown weight ordering {!r}.'.format(ordering))
    scores = {int(k): float(v) for k, v in per_drf.items()}
    missing = [d for d in WEIGHT_ORDERINGS[ordering] if d not in scores]
    if missing:
        raise ArgumentError('Weighted score needs DRFs {}, missing {}.'.format(
            sorted(WEIGHT_ORDERINGS[ordering]), missing
        ))
    return sum(w * scores[d] for w, d in zip(WEIGHTS, WEIGHT_ORDERINGS[ordering]))


@dataclass(frozen=True)
class ROISphere:
    center: Tuple[float, float, float]
    diameter: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
        low, high = ROI_DIAMETER_RANGE
        if len(self.center) != 3:
            raise GeometryError('ROI centre must have three coordinates, got {}.'.format(self.center))
        if not low <= self.diameter <= high:
            raise GeometryError('ROI diameter {} mm lies outside [{}, {}].'.format(self.diameter, low, high))

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    def to_dict(self) -> Dict:
        return {'center': list(self.center), 'diameter': self.diameter}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'ROISphere':
        return cls(center=tuple(data['center']), diameter=float(data.get('diameter', 20.0)))


def roi_mask(shape: Sequence[int], spacing: Sequence[float], roi: ROISphere) -> np.ndarray:
    """
    Voxels whose centres lie within the sphere, in millimetre coordinates
    measured from voxel `(0, 0, 0)`.
    """
    extent = (np.asarray(shape) - 1) * np.asarray(spacing)
    center = np.asarray(roi.center)
    if (center - roi.radius < 0).any() or (center + roi.radius > extent).any():
        raise GeometryError('ROI at {} with diameter {} leaves the volume.'.format(roi.center, roi.diameter))

    axes = [np.arange(n) * s - c for n, s, c in zip(shape, spacing, center)]
    dx, dy, dz = np.meshgrid(*axes, indexing='ij', sparse=True)
    return dx ** 2 + dy ** 2 + dz ** 2 <= roi.radius ** 2


def roi_suv_stats(v: Volume, roi: ROISphere) -> Tuple[float, float]:
    """
    Returns `(SUVmax, SUVmean)` inside `roi`.
    """
    mask = roi_mask(v.shape, v.spacing, roi)
    if not mask.any():
        raise GeometryError('ROI at {} contains no voxel centre.'.format(roi.center))
    values = v.voxels[mask]
    return float(values.max()), float(values.mean(dtype=np.float64))


def percentage_error(ref_stat: float, pred_stat: float) -> float:
    if not ref_stat > 0:
        raise ArgumentError('Reference statistic must be positive, got {}.'.format(ref_stat))
    return 100.0 * abs(pred_stat - ref_stat) / ref_stat


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """
    Two-sided paired t-test, returned as `(t, p)`.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ArgumentError('Paired t-test needs two equal-length samples of at least 2 values.')

    differences = a - b
    if np.all(differences == differences[0]):
        raise DegenerateStatisticError('Paired differences have zero variance.')

    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


def kfold_split(n: int, k: int, seed: int = 0) -> List[Tuple[List[int], List[int]]]:
    """
    Shuffles `range(n)` and cuts it into `k` folds whose sizes differ by at
    most one; returns `(train ids, val ids)` per fold.
    """
    if k < 2:
        raise ArgumentError('k-fold needs k >= 2, got {}.'.format(k))
    if k > n:
        raise ArgumentError('Cannot cut {} ids into {} folds.'.format(n, k))

    order = np.random.default_rng(seed).permutation(n)
    folds = [sorted(int(i) for i in fold) for fold in np.array_split(order, k)]
    return [
        (sorted(i for other in folds if other is not fold for i in other), fold)
        for fold in folds
    ]


@dataclass
class MetricsReport:
    per_drf: Dict[int, Dict[str, float]] = field(default_factory=dict)
    low_dose: Dict[int, Dict[str, float]] = field(default_factory=dict)
    weighted: Dict[str, Dict[str, float]] = field(default_factory=dict)
    weight_ordering: str = ORDERING_TABLES
    label: str = ''
    definitions: Dict[str, str] = field(default_factory=lambda: dict(DEFINITIONS))
    scanner_profiles: Dict[str, str] = field(default_factory=dict)
    roi: Optional[Dict] = None
    ttest: Optional[Dict] = None
    kfold: Optional[Dict] = None

    def __post_init__(self):
        self.per_drf = {int(k): v for k, v in self.per_drf.items()}
        self.low_dose = {int(k): v for k, v in self.low_dose.items()}

    def headline(self, metric: str, source: str = SOURCE_MODEL) -> float:
        """
        Weighted score of `metric` under the report's ordering when all
        five DRFs are present, otherwise the plain mean over DRFs.
        """
        block = self.per_drf if source == SOURCE_MODEL else self.low_dose
        if not block:
            raise ArgumentError('Report {!r} holds no {} metrics.'.format(self.label, source))
        values = {drf: row[metric] for drf, row in block.items()}
        try:
            return weighted_score(values, self.weight_ordering)
        except ArgumentError:
            return float(np.mean(list(values.values())))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['per_drf'] = {str(k): v for k, v in sorted(self.per_drf.items())}
        data['low_dose'] = {str(k): v for k, v in sorted(self.low_dose.items())}
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> 'MetricsReport':
        return cls(**data)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
        return path

    @classmethod
    def load(cls, path: PathLike) -> 'MetricsReport':
        return cls.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))


@dataclass
class EvalOptions:
    split: str = SPLIT_TEST
    drfs: Optional[Tuple[int, ...]] = None
    with_roi: bool = True
    ordering: str = ORDERING_TABLES
    label: str = ''
    compare_with: Optional[str] = None
    folds: Optional[str] = None
    baseline_folds: Optional[str] = None

    def __post_init__(self):
        if self.drfs is not None:
            self.drfs = tuple(sorted(int(DoseLevel.parse(d)) for d in self.drfs))
        self.clean()

    def clean(self) -> None:
        if self.split not in SPLIT_NAMES:
            raise ConfigurationError('Unknown split {!r}; choose one of {}.'.format(self.split, SPLIT_NAMES))
        if self.ordering not in WEIGHT_ORDERINGS:
            raise ConfigurationError('Unknown weight ordering {!r}.'.format(self.ordering))
        if self.drfs is not None and (not self.drfs or DoseLevel.FULL in self.drfs):
            raise ConfigurationError('Evaluation DRFs must be reduced dose levels, got {}.'.format(self.drfs))
        if self.baseline_folds and not self.folds:
            raise ConfigurationError('baseline_folds needs folds to compare against.')

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.drfs is not None:
            data['drfs'] = list(self.drfs)
        return data

def _mean_rows(rows: Sequence[Dict]) -> Dict[int, Dict[str, float]]:
    grouped: Dict[int, List[Dict]] = {}
    for row in rows:
        grouped.setdefault(int(row['drf']), []).append(row)
    return {
        drf: {m: float(np.mean([r[m] for r in group])) for m in METRICS}
        for drf, group in sorted(grouped.items())
    }


def _weighted_block(per_drf: Dict[int, Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    if not all(d in per_drf for d in WEIGHT_ORDERINGS[ORDERING_TABLES]):
        return {}
    return {
        ordering: {m: weighted_score({d: row[m] for d, row in per_drf.items()}, ordering) for m in METRICS}
        for ordering in WEIGHT_ORDERINGS
    }


def roi_summary(rows: Sequence[Dict]) -> Dict:
    summary = {}
    for drf in sorted({int(r['drf']) for r in rows}):
        group = [r for r in rows if int(r['drf']) == drf]
        summary[str(drf)] = {
            key: {'mean': float(np.mean([r[key] for r in group])), 'std': float(np.std([r[key] for r in group]))}
            for key in ('error_max', 'error_mean')
        }
    return {'rows': list(rows), 'summary': summary}


def evaluate_subjects(
    manifest: DatasetManifest,
    predict: Callable[[Volume], Volume],
    drfs: Optional[Sequence[int]] = None,
    split: str = SPLIT_TEST,
    with_roi: bool = True,
    label: str = '',
    ordering: str = ORDERING_TABLES
) -> Tuple[List[Dict], MetricsReport]:
    """
    Scores `predict(low)` and the unprocessed low-dose volume against the
    full-dose volume of every `split` subject.

    Returns one row per `(subject, DRF, source)` and the aggregated report.
    """
    drfs = sorted(int(d) for d in (drfs or manifest.drfs()))
    rows, roi_rows = [], []

    for subject in manifest.subjects(split):
        entry = manifest.entry(subject)
        full = load_volume(manifest.full_path(subject))
        roi = ROISphere.from_dict(entry.roi) if with_roi and entry.roi else None

        for drf in drfs:
            if drf not in entry.low:
                continue
            low = load_volume(manifest.low_path(subject, drf))
            predicted = predict(low)
            for source, volume in ((SOURCE_MODEL, predicted), (SOURCE_LOW_DOSE, low)):
                rows.append(dict(subject=subject, drf=drf, source=source, **image_metrics(full, volume)))

            if roi is not None:
                ref_max, ref_mean = roi_suv_stats(full, roi)
                pred_max, pred_mean = roi_suv_stats(predicted, roi)
                roi_rows.append({
                    'subject': subject,
                    'drf': drf,
                    'suv_max_ref': ref_max,
                    'suv_max_pred': pred_max,
                    'suv_mean_ref': ref_mean,
                    'suv_mean_pred': pred_mean,
                    'error_max': percentage_error(ref_max, pred_max),
                    'error_mean': percentage_error(ref_mean, pred_mean),
                })
        logger.debug('Scored %s', subject)

    if not rows:
        raise ArgumentError('No {} subject has any of DRFs {}.'.format(split, drfs))

    report = build_report(
        rows, roi_rows,
        label=label,
        ordering=ordering,
        scanner_profiles={'eval': str(manifest.metadata.get('scanner_profile', ''))}
    )
    return rows, report


def build_report(
    rows: Sequence[Dict],
    roi_rows: Sequence[Dict] = (),
    label: str = '',
    ordering: str = ORDERING_TABLES,
    scanner_profiles: Optional[Dict[str, str]] = None
) -> MetricsReport:
    """
    Aggregates per-subject rows into a report; rows of the same subject
    and DRF are averaged like any other.
    """
    per_drf = _mean_rows([r for r in rows if r['source'] == SOURCE_MODEL])
    return MetricsReport(
        per_drf=per_drf,
        low_dose=_mean_rows([r for r in rows if r['source'] == SOURCE_LOW_DOSE]),
        weighted=_weighted_block(per_drf),
        weight_ordering=ordering,
        label=label,
        scanner_profiles=dict(scanner_profiles or {}),
        roi=roi_summary(roi_rows) if roi_rows else None
    )


def kfold_summary(folds: Sequence[MetricsReport], baseline: Optional[Sequence[MetricsReport]] = None) -> Dict:
    """
    Per-fold headline PSNR and NRMSE with mean and standard deviation, and
    paired t-tests against `baseline` folds when given.
    """
    section = {}
    for metric in ('psnr', 'nrmse'):
        values = [report.headline(metric) for report in folds]
        section[metric] = {'folds': values, 'mean': float(np.mean(values)), 'std': float(np.std(values))}

        if baseline is not None:
            other = [report.headline(metric) for report in baseline]
            t, p = paired_ttest(values, other)
            section[metric]['ttest'] = {'baseline': other, 't': t, 'p': p}
    return section


def read_metric_rows(path: PathLike) -> List[Dict]:
    """
    Reads the per-subject CSV written by the `eval` command.
    """
    path = Path(path)
    if not path.exists():
        raise ResolutionError('Metrics file {} does not exist.'.format(path))
    with path.open(newline='', encoding='utf-8') as fh:
        rows = list(csv.DictReader(fh))

    parsed = []
    for row in rows:
        item = {'subject': row['subject'], 'drf': int(row['drf']), 'source': row['source']}
        for metric in METRICS:
            item[metric] = float(row[metric])
        parsed.append(item)
    return parsed


def compare_runs(rows: Sequence[Dict], other: Sequence[Dict], source: str = SOURCE_MODEL) -> Dict:
    """
    Paired t-test of every metric between two runs scored on the same
    subjects, paired on `(subject, drf)`.
    """
    def index(items):
        return {(r['subject'], int(r['drf'])): r for r in items if r['source'] == source}

    ours, theirs = index(rows), index(other)
    keys = sorted(set(ours) & set(theirs))
    if len(keys) < 2:
        raise ArgumentError('Runs share {} (subject, DRF) pairs; a paired t-test needs 2.'.format(len(keys)))

    section = {'pairs': len(keys)}
    for metric in METRICS:
        a = [ours[k][metric] for k in keys]
        b = [theirs[k][metric] for k in keys]
        if not np.isfinite(a + b).all():
            logger.warning('Skipping the %s t-test: some values are infinite', metric)
            continue
        t, p = paired_ttest(a, b)
        section[metric] = {'t': t, 'p': p, 'mean_difference': float(np.mean(np.subtract(a, b)))}
    return section
