"""
Synthetic total-body-like PET phantoms and count-limited low-dose
acquisition at each dose reduction factor.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from django_aegan.evaluation import ROISphere
from django_aegan.exceptions import ArgumentError, ConfigurationError, SpecError
from django_aegan.volumes import (
    DatasetManifest,
    DoseLevel,
    ManifestEntry,
    PathLike,
    Volume,
    save_volume,
    split_dataset,
)


logger = logging.getLogger(__name__)

LIVER = 'liver'
LIVER_MIN_RADIUS = 10.5
ROI_DIAMETER = 20.0


@dataclass(frozen=True)
class ScannerProfile:
    name: str
    spacing: Tuple[float, float, float]
    counts_per_suv: float


SCANNER_PROFILES: Dict[str, ScannerProfile] = {
    'A': ScannerProfile('A', (1.65, 1.65, 1.65), 400.0),
    'B': ScannerProfile('B', (1.667, 1.667, 2.886), 250.0),
}


@dataclass
class Ellipsoid:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    suv: float
    name: str = 'organ'


@dataclass
class Lesion:
    center: Tuple[float, float, float]
    radius: float
    suv: float

    def as_ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(self.center, (self.radius,) * 3, self.suv, name='lesion')


@dataclass
class PhantomSpec:
    """
    Analytic phantom description. Coordinates are millimetres measured
    from the centre of voxel `(0, 0, 0)`.
    """
    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = SCANNER_PROFILES['A'].spacing
    background_suv: float = 1.0
    organs: List[Ellipsoid] = field(default_factory=list)
    lesions: List[Lesion] = field(default_factory=list)
    counts_per_suv: float = SCANNER_PROFILES['A'].counts_per_suv
    scanner_profile: str = 'A'
    texture: float = 0.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.clean()

    @classmethod
    def for_profile(cls, shape: Sequence[int], profile: str = 'A', **kwargs) -> 'PhantomSpec':
        if profile not in SCANNER_PROFILES:
            raise SpecError('Unknown scanner profile {!r}.'.format(profile))
        preset = SCANNER_PROFILES[profile]
        kwargs.setdefault('spacing', preset.spacing)
        kwargs.setdefault('counts_per_suv', preset.counts_per_suv)
        return cls(shape=tuple(shape), scanner_profile=profile, **kwargs)

    @property
    def extent(self) -> np.ndarray:
        """
        Millimetre coordinate of the last voxel centre along each axis.
        """
        return (np.asarray(self.shape) - 1) * np.asarray(self.spacing)

    def clean(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise SpecError('Phantom shape must be three positive integers, got {}.'.format(self.shape))
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise SpecError('Phantom spacing must be positive, got {}.'.format(self.spacing))
        if self.background_suv < 0:
            raise SpecError('Background SUV must be non-negative, got {}.'.format(self.background_suv))
        if not self.counts_per_suv > 0:
            raise SpecError('counts_per_suv must be positive, got {}.'.format(self.counts_per_suv))
        if self.texture < 0:
            raise SpecError('Texture amplitude must be non-negative, got {}.'.format(self.texture))

        for item in self.organs + [lesion.as_ellipsoid() for lesion in self.lesions]:
            if item.suv < 0:
                raise SpecError('{} SUV must be non-negative, got {}.'.format(item.name, item.suv))
            if min(item.radii) <= 0:
                raise SpecError('{} radii must be positive, got {}.'.format(item.name, item.radii))
            low = np.asarray(item.center) - np.asarray(item.radii)
            high = np.asarray(item.center) + np.asarray(item.radii)
            if (low < 0).any() or (high > self.extent).any():
                raise SpecError(
                    '{} at {} with radii {} lies outside the volume bounds {}.'.format(
                        item.name, item.center, item.radii, tuple(self.extent)
                    )
                )

    def organ(self, name: str) -> Optional[Ellipsoid]:
        return next((o for o in self.organs if o.name == name), None)


def _coverage(spec: PhantomSpec, item: Ellipsoid) -> np.ndarray:
    """
    Returns the fractional membership of every voxel in `item`, ramping
    linearly from 1 to 0 over one voxel across the boundary.
    """
    axes = [np.arange(n) * s - c for n, s, c in zip(spec.shape, spec.spacing, item.center)]
    dx, dy, dz = np.meshgrid(*axes, indexing='ij', sparse=True)
    rx, ry, rz = item.radii

    scaled = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2 + (dz / rz) ** 2)
    radial = np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)
    with np.errstate(divide='ignore', invalid='ignore'):
        signed = np.where(scaled > 0, radial * (1.0 - 1.0 / scaled), -min(item.radii))

    voxel_size = float(np.mean(spec.spacing))
    return np.clip(0.5 - signed / voxel_size, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec, seed: int = 0) -> Volume:
    """
    Renders `spec` as a full-dose volume. `seed` only drives the optional
    organ texture, so phantoms with `texture == 0` ignore it.
    """
    spec.clean()
    voxels = np.full(spec.shape, spec.background_suv, dtype=np.float64)

    texture = None
    if spec.texture > 0:
        noise = np.random.default_rng(seed).standard_normal(spec.shape)
        noise = ndimage.gaussian_filter(noise, sigma=1.5)
        texture = 1.0 + spec.texture * noise / (noise.std() or 1.0)

    for organ in spec.organs:
        contribution = _coverage(spec, organ) * (organ.suv - spec.background_suv)
        voxels += contribution * texture if texture is not None else contribution
    for lesion in spec.lesions:
        voxels += _coverage(spec, lesion.as_ellipsoid()) * (lesion.suv - spec.background_suv)

    return Volume(
        voxels=np.clip(voxels, 0.0, None),
        spacing=spec.spacing,
        drf=DoseLevel.FULL,
        id='phantom'
    )


def poisson_resample(
    voxels: np.ndarray,
    counts_per_suv: float,
    drf: int,
    rng: np.random.Generator
) -> np.ndarray:
    """
    Draws a count image with expectation `voxels * counts_per_suv / drf`
    and rescales it back to SUV, so the expectation equals `voxels`.
    """
    voxels = np.asarray(voxels, dtype=np.float64)
    if (voxels < 0).any() or not np.isfinite(voxels).all():
        raise ArgumentError('Cannot resample a volume with negative or non-finite voxels.')

    counts = rng.poisson(voxels * counts_per_suv / drf)
    return (counts * (drf / counts_per_suv)).astype(np.float32)


def simulate_low_dose(full: Volume, drf, spec: PhantomSpec, seed: int = 0) -> Volume:
    drf = DoseLevel.parse(drf)
    if full.drf != DoseLevel.FULL:
        raise ArgumentError('Volume {} is already reduced to DRF {}.'.format(full.id, int(full.drf)))
    if drf == DoseLevel.FULL:
        return full.with_voxels(full.voxels.copy())

    rng = np.random.default_rng(seed)
    voxels = poisson_resample(full.voxels, spec.counts_per_suv, int(drf), rng)
    return full.with_voxels(voxels, drf=drf)


def derive_seed(*keys: int) -> int:
    """
    Stable 32-bit seed derived from a tuple of integers, so the stream of
    a subject does not depend on which worker generates it.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _fit_radius(preferred: float, extent: float, margin: float, minimum: float) -> float:
    limit = extent / 2.0 - margin
    if limit < minimum:
        raise SpecError(
            'Axis extent {:.2f} mm cannot host a radius of {:.2f} mm.'.format(extent, minimum)
        )
    return float(np.clip(preferred, minimum, limit))


def _draw_center(rng: np.random.Generator, radii: np.ndarray, extent: np.ndarray, margin: float) -> np.ndarray:
    low = radii + margin
    high = np.maximum(extent - radii - margin, low)
    return rng.uniform(low, high)


def _overlaps(center: np.ndarray, radii: np.ndarray, organ: Ellipsoid, margin: float) -> bool:
    gap = np.linalg.norm(center - np.asarray(organ.center))
    return gap < float(np.max(radii)) + max(organ.radii) + margin


def randomize_spec(template: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    """
    Draws one subject from `template`: background SUV in [0.5, 1.5], an
    always-present homogeneous liver, up to two extra organs and one to
    three lesions with SUV in [4, 12], none of them touching the liver.
    """
    extent = template.extent
    margin = float(max(template.spacing))

    liver_radii = np.array([
        _fit_radius(frac * rng.uniform(0.9, 1.1) * ext, ext, margin, LIVER_MIN_RADIUS)
        for frac, ext in zip((0.22, 0.18, 0.25), extent)
    ])
    liver = Ellipsoid(
        center=tuple(_draw_center(rng, liver_radii, extent, margin)),
        radii=tuple(liver_radii),
        suv=float(rng.uniform(2.0, 3.0)),
        name=LIVER
    )

    organs = [liver]
    for _ in range(int(rng.integers(0, 3))):
        radii = rng.uniform(4.0, 8.0, size=3)
        radii = np.minimum(radii, extent / 2.0 - margin)
        if (radii <= 0).any():
            break
        for _attempt in range(20):
            center = _draw_center(rng, radii, extent, margin)
            if not _overlaps(center, radii, liver, margin):
                organs.append(Ellipsoid(tuple(center), tuple(radii), float(rng.uniform(2.0, 6.0))))
                break

    lesions = []
    for _ in range(int(rng.integers(1, 4))):
        radius = float(min(rng.uniform(2.0, 5.0), float(np.min(extent)) / 2.0 - margin))
        if radius <= 0:
            break
        for _attempt in range(20):
            center = _draw_center(rng, np.full(3, radius), extent, margin)
            if not _overlaps(center, np.full(3, radius), liver, margin):
                lesions.append(Lesion(tuple(center), radius, float(rng.uniform(4.0, 12.0))))
                break

    return replace(
        template,
        background_suv=float(rng.uniform(0.5, 1.5)),
        organs=organs,
        lesions=lesions
    )


def liver_roi(spec: PhantomSpec, diameter: float = ROI_DIAMETER) -> ROISphere:
    liver = spec.organ(LIVER)
    if liver is None:
        raise SpecError('Phantom has no liver to place the ROI in.')
    return ROISphere(center=tuple(liver.center), diameter=diameter)


def _write_subject(
    index: int,
    template: PhantomSpec,
    drfs: Sequence[DoseLevel],
    seed: int,
    out_dir: Path,
    suffix: str
) -> ManifestEntry:
    subject = 'sub-{:03d}'.format(index)
    rng = np.random.default_rng(derive_seed(seed, index))
    spec = randomize_spec(template, rng)

    subject_dir = out_dir / subject
    subject_dir.mkdir(parents=True, exist_ok=True)

    full = replace(generate_phantom(spec, seed=derive_seed(seed, index, 0)), id=subject)
    full_name = '{}/full{}'.format(subject, suffix)
    save_volume(full, out_dir / full_name)

    low = {}
    for drf in drfs:
        reduced = simulate_low_dose(full, drf, spec, seed=derive_seed(seed, index, int(drf)))
        name = '{}/drf{:03d}{}'.format(subject, int(drf), suffix)
        save_volume(reduced, out_dir / name)
        low[int(drf)] = name

    logger.debug('Generated %s with %d low-dose volumes', subject, len(low))
    return ManifestEntry(
        subject=subject,
        full=full_name,
        low=low,
        scanner_profile=spec.scanner_profile,
        roi=liver_roi(spec).to_dict()
    )


def build_dataset(
    n_subjects: int,
    drfs: Sequence,
    template: PhantomSpec,
    seed: int,
    out_dir: PathLike,
    volume_format: str = 'raw',
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    workers: int = 1
) -> DatasetManifest:
    """
    Generates `n_subjects` phantoms with one low-dose volume per DRF and
    writes them, plus `manifest.json`, under `out_dir`.
    """
    if n_subjects < 3:
        raise ConfigurationError('A dataset needs at least 3 subjects, got {}.'.format(n_subjects))

    drfs = sorted({DoseLevel.parse(d) for d in drfs})
    if not drfs or DoseLevel.FULL in drfs:
        raise ConfigurationError('Dataset DRFs must be reduced dose levels, got {}.'.format(
            [int(d) for d in drfs]
        ))
    suffix = {'raw': '.vol', 'nifti': '.nii.gz'}.get(volume_format)
    if suffix is None:
        raise ConfigurationError('Unknown volume format {!r}.'.format(volume_format))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def make(index: int) -> ManifestEntry:
        return _write_subject(index, template, drfs, seed, out_dir, suffix)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(make, range(n_subjects)))
    else:
        entries = [make(i) for i in range(n_subjects)]

    manifest = DatasetManifest(
        entries=entries,
        split=split_dataset([e.subject for e in entries], ratios, seed),
        root=out_dir,
        metadata={
            'seed': int(seed),
            'drfs': [int(d) for d in drfs],
            'scanner_profile': template.scanner_profile,
            'shape': list(template.shape),
            'spacing': list(template.spacing),
            'counts_per_suv': template.counts_per_suv,
            'volume_format': volume_format,
        }
    )
    manifest.save(out_dir / DatasetManifest.FILENAME)
    logger.info('Wrote %d subjects x %d DRFs to %s', n_subjects, len(drfs), out_dir)
    return manifest
