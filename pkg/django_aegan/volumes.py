"""
Volume data model, file I/O, SUV normalization and dataset splitting.

A `Volume` stores its voxels as a float32 array indexed `[x, y, z]`. The
raw on-disk format is header-less little-endian float32 written with `z`
as the slowest axis, next to a `<name>.vol.json` sidecar.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from django.db import models

from django_aegan.exceptions import (
    ArgumentError,
    ConfigurationError,
    DataError,
    ResolutionError,
    VolumeValidationError,
)


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RAW_SUFFIX = '.vol'
SIDECAR_SUFFIX = '.json'
NIFTI_SUFFIXES = ('.nii', '.nii.gz')
# header extension carrying the `{"drf", "id"}` JSON of a saved volume
NIFTI_META_CODE = 'comment'


class DoseLevel(models.IntegerChoices):
    FULL = 1, 'Full dose'
    DRF_4 = 4, 'DRF 4'
    DRF_10 = 10, 'DRF 10'
    DRF_20 = 20, 'DRF 20'
    DRF_50 = 50, 'DRF 50'
    DRF_100 = 100, 'DRF 100'

    @classmethod
    def parse(cls, value) -> 'DoseLevel':
        """
        Returns the `DoseLevel` matching `value`, raising `ArgumentError`
        for anything outside the enumerated set.
        """
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise ArgumentError(
                'Dose level {!r} is not one of {}.'.format(value, list(cls.values))
            )

    @property
    def is_reduced(self) -> bool:
        return self.value > 1


REDUCED_DOSE_LEVELS: Tuple[DoseLevel, ...] = tuple(d for d in DoseLevel if d.is_reduced)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    drf: DoseLevel = DoseLevel.FULL
    id: str = 'volume'

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.drf = DoseLevel.parse(self.drf)
        self.clean()

    def clean(self) -> None:
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeValidationError(
                'Volume {} must be a non-empty 3D grid, got shape {}.'.format(self.id, self.voxels.shape)
            )
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeValidationError(
                'Volume {} has non-positive spacing {}.'.format(self.id, self.spacing)
            )

        invalid = int(np.count_nonzero(~np.isfinite(self.voxels) | (self.voxels < 0)))
        if invalid:
            raise VolumeValidationError(
                'Volume {} has {} invalid voxels (NaN, infinite or negative).'.format(self.id, invalid),
                invalid_count=invalid
            )

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, **changes) -> 'Volume':
        """
        Returns a copy of `self` carrying `voxels` and the same metadata,
        except for the fields overridden in `changes`.
        """
        return replace(self, voxels=voxels, **changes)


def normalize_suv(v: Volume, scale: float) -> Volume:
    if not scale > 0:
        raise ArgumentError('SUV scale must be positive, got {}.'.format(scale))
    return v.with_voxels(v.voxels / np.float32(scale))


def denormalize_suv(v: Volume, scale: float) -> Volume:
    if not scale > 0:
        raise ArgumentError('SUV scale must be positive, got {}.'.format(scale))
    return v.with_voxels(v.voxels * np.float32(scale))


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(NIFTI_SUFFIXES)


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def load_volume(path: PathLike) -> Volume:
    path = Path(path)
    if _is_nifti(path):
        return _load_nifti(path)
    return _load_raw(path)


def save_volume(v: Volume, path: PathLike) -> None:
    path = Path(path)
    if _is_nifti(path):
        _save_nifti(v, path)
    else:
        _save_raw(v, path)


def _load_raw(path: Path) -> Volume:
    meta = json.loads(sidecar_path(path).read_text(encoding='utf-8'))
    shape = tuple(int(s) for s in meta['shape'])
    payload = np.fromfile(str(path), dtype='<f4')

    if payload.size != int(np.prod(shape)):
        raise VolumeValidationError(
            'Raw volume {} holds {} voxels, sidecar declares shape {}.'.format(path, payload.size, shape)
        )

    return Volume(
        voxels=payload.reshape(shape, order='F'),
        spacing=meta['spacing'],
        drf=meta.get('drf', DoseLevel.FULL),
        id=meta.get('id', path.name[:-len(RAW_SUFFIX)] if path.name.endswith(RAW_SUFFIX) else path.stem)
    )


def _save_raw(v: Volume, path: Path) -> None:
    path.write_bytes(v.voxels.astype('<f4').tobytes(order='F'))
    meta = {
        'shape': list(v.shape),
        'spacing': list(v.spacing),
        'drf': int(v.drf),
        'id': v.id,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')


def _nifti_tags(header) -> Dict:
    for ext in header.extensions:
        if ext.get_code() != nib.nifti1.extension_codes.code[NIFTI_META_CODE]:
            continue
        try:
            return json.loads(ext.get_content().rstrip(b'\x00').decode('utf-8'))
        except ValueError:
            continue

    # files from other tools only carry the short description
    descrip = header['descrip'].item()
    if isinstance(descrip, bytes):
        descrip = descrip.decode('ascii', errors='ignore')
    return dict(item.split('=', 1) for item in descrip.split(';') if '=' in item)


def _load_nifti(path: Path) -> Volume:
    img = nib.load(str(path))
    tags = _nifti_tags(img.header)
    default_id = path.name
    for suffix in NIFTI_SUFFIXES:
        if default_id.endswith(suffix):
            default_id = default_id[:-len(suffix)]

    return Volume(
        voxels=np.asarray(img.get_fdata(dtype=np.float32)),
        spacing=tuple(float(z) for z in img.header.get_zooms()[:3]),
        drf=int(tags.get('drf', DoseLevel.FULL)),
        id=tags.get('id', default_id)
    )


def _save_nifti(v: Volume, path: Path) -> None:
    affine = np.diag(list(v.spacing) + [1.0])
    img = nib.Nifti1Image(v.voxels.astype(np.float32), affine)
    img.header.set_data_dtype(np.float32)
    img.header.set_zooms(v.spacing)
    img.header['descrip'] = 'drf={}'.format(int(v.drf))
    meta = json.dumps({'drf': int(v.drf), 'id': v.id}).encode('utf-8')
    img.header.extensions.append(nib.nifti1.Nifti1Extension(NIFTI_META_CODE, meta))
    nib.save(img, str(path))


def allocate_counts(n: int, ratios: Sequence[float]) -> List[int]:
    """
    Largest-remainder rounding of `ratio * n` per bucket. Ties on the
    remainder go to the earlier bucket.
    """
    quotas = [r * n for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


SPLIT_TRAIN = 'train'
SPLIT_VAL = 'val'
SPLIT_TEST = 'test'
SPLIT_NAMES = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)


def split_dataset(
    subjects: Iterable[str],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0
) -> Dict[str, str]:
    """
    Assigns every subject to exactly one of `train`, `val`, `test`.

    The assignment only depends on the set of subjects and `seed`.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLIT_NAMES) or min(ratios) <= 0:
        raise ArgumentError('Split ratios must be three positive numbers, got {}.'.format(ratios))
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError('Split ratios must sum to 1, got {}.'.format(sum(ratios)))

    ids = sorted(set(subjects))
    if len(ids) < len(SPLIT_NAMES):
        raise ConfigurationError(
            'Cannot split {} subjects into {} non-empty buckets.'.format(len(ids), len(SPLIT_NAMES))
        )

    counts = allocate_counts(len(ids), ratios)
    # every bucket keeps at least one subject; the largest one donates
    for i, count in enumerate(counts):
        if count == 0:
            counts[counts.index(max(counts))] -= 1
            counts[i] = 1
    order = np.random.default_rng(seed).permutation(len(ids))

    split = {}
    start = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for idx in order[start:start + count]:
            split[ids[idx]] = name
        start += count
    return split


@dataclass
class ManifestEntry:
    subject: str
    full: str
    low: Dict[int, str]
    scanner_profile: str = 'A'
    roi: Optional[Dict] = None

    def to_dict(self) -> Dict:
        data = {
            'subject': self.subject,
            'full': self.full,
            'low': {str(k): v for k, v in sorted(self.low.items())},
            'scanner_profile': self.scanner_profile,
        }
        if self.roi is not None:
            data['roi'] = self.roi
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ManifestEntry':
        return cls(
            subject=data['subject'],
            full=data['full'],
            low={int(k): v for k, v in data.get('low', {}).items()},
            scanner_profile=data.get('scanner_profile', 'A'),
            roi=data.get('roi')
        )


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    split: Dict[str, str] = field(default_factory=dict)
    root: Path = Path('.')
    metadata: Dict = field(default_factory=dict)

    FILENAME = 'manifest.json'

    def __post_init__(self):
        self.clean()

    def clean(self) -> None:
        for entry in self.entries:
            if not entry.full:
                raise DataError('Subject {} has no full-dose volume.'.format(entry.subject))
            if not entry.low:
                raise DataError('Subject {} has no low-dose volume.'.format(entry.subject))
            for drf in entry.low:
                DoseLevel.parse(drf)

        unknown = set(self.split) - {e.subject for e in self.entries}
        if unknown:
            raise DataError('Split references unknown subjects: {}.'.format(sorted(unknown)))

    def subjects(self, split: Optional[str] = None) -> List[str]:
        """
        Returns subject ids in manifest order, narrowed down to `split`
        when it is given.
        """
        return [
            e.subject for e in self.entries
            if split is None or self.split.get(e.subject) == split
        ]

    def entry(self, subject: str) -> ManifestEntry:
        for e in self.entries:
            if e.subject == subject:
                return e
        raise ResolutionError('Subject {} is not in the manifest.'.format(subject))

    def drfs(self) -> List[int]:
        return sorted({drf for e in self.entries for drf in e.low})

    def full_path(self, subject: str) -> Path:
        return self.root / self.entry(subject).full

    def low_path(self, subject: str, drf: int) -> Path:
        entry = self.entry(subject)
        if int(drf) not in entry.low:
            raise ResolutionError('Subject {} has no DRF {} volume.'.format(subject, drf))
        return self.root / entry.low[int(drf)]

    def load_pair(self, subject: str, drf: int) -> Tuple[Volume, Volume]:
        """
        Returns the `(low-dose, full-dose)` volumes of `subject` at `drf`.
        """
        return load_volume(self.low_path(subject, drf)), load_volume(self.full_path(subject))

    def to_dict(self) -> Dict:
        return {
            'schema_version': 1,
            'metadata': self.metadata,
            'entries': [e.to_dict() for e in self.entries],
            'split': dict(sorted(self.split.items())),
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
        return path

    @classmethod
    def load(cls, path: PathLike) -> 'DatasetManifest':
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        if not path.exists():
            raise ResolutionError('Manifest {} does not exist.'.format(path))

        data = json.loads(path.read_text(encoding='utf-8'))
        return cls(
            entries=[ManifestEntry.from_dict(e) for e in data.get('entries', [])],
            split=data.get('split', {}),
            root=path.parent,
            metadata=data.get('metadata', {})
        )


def write_csv(rows: Sequence[Dict], path: PathLike, columns: Optional[Sequence[str]] = None) -> Path:
    """
    Writes `rows` as CSV. Columns default to the keys of the first row,
    in insertion order.
    """
    path = Path(path)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), extrasaction='ignore')
        writer.writeheader()
        writer.writerows(rows)
    return path
