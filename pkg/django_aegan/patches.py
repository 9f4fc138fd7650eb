"""
Overlapping patch extraction, paired random crops for training and
overlap-averaged merging for whole-volume inference.
"""
from dataclasses import dataclass
from itertools import product
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from django_aegan.exceptions import ArgumentError, CoverageError
from django_aegan.volumes import DoseLevel, Volume


Shape = Tuple[int, int, int]
Patch = Tuple[np.ndarray, Shape]


@dataclass(frozen=True)
class PatchGridSpec:
    patch_shape: Shape = (32, 32, 16)
    stride: Shape = (16, 16, 8)

    def __post_init__(self):
        object.__setattr__(self, 'patch_shape', tuple(int(p) for p in self.patch_shape))
        object.__setattr__(self, 'stride', tuple(int(s) for s in self.stride))

        if len(self.patch_shape) != 3 or len(self.stride) != 3:
            raise ArgumentError('Patch shape and stride must have three axes.')
        for p, s in zip(self.patch_shape, self.stride):
            if not 1 <= s <= p:
                raise ArgumentError(
                    'Stride {} must lie within [1, patch size] for patch {}.'.format(self.stride, self.patch_shape)
                )

    @classmethod
    def tiling(cls, patch_shape: Sequence[int]) -> 'PatchGridSpec':
        return cls(tuple(patch_shape), tuple(patch_shape))

    @classmethod
    def half_overlap(cls, patch_shape: Sequence[int]) -> 'PatchGridSpec':
        return cls(tuple(patch_shape), tuple(max(1, p // 2) for p in patch_shape))

    def to_dict(self):
        return {'patch_shape': list(self.patch_shape), 'stride': list(self.stride)}


@dataclass
class PatchPair:
    low: np.ndarray
    std: np.ndarray
    origin: Shape
    subject: str = ''
    drf: DoseLevel = DoseLevel.FULL


def _check_fits(volume_shape: Sequence[int], patch_shape: Sequence[int]) -> None:
    if any(p > v for p, v in zip(patch_shape, volume_shape)):
        raise ArgumentError(
            'Patch {} does not fit inside volume {}.'.format(tuple(patch_shape), tuple(volume_shape))
        )


def axis_origins(length: int, patch: int, stride: int) -> List[int]:
    """
    Regular lattice `0, stride, 2 * stride, ...` whose last origin is
    clamped to `length - patch` so the final patch ends on the boundary.
    """
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def patch_origins(volume_shape: Sequence[int], grid: PatchGridSpec) -> List[Shape]:
    _check_fits(volume_shape, grid.patch_shape)
    axes = [axis_origins(n, p, s) for n, p, s in zip(volume_shape, grid.patch_shape, grid.stride)]
    return [tuple(o) for o in product(*axes)]


def _window(origin: Sequence[int], patch_shape: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))


def extract_patches(v: Volume, grid: PatchGridSpec) -> List[Patch]:
    return [
        (v.voxels[_window(origin, grid.patch_shape)].copy(), origin)
        for origin in patch_origins(v.shape, grid)
    ]


def average_patches(patches: Iterable[Patch], out_shape: Sequence[int]) -> np.ndarray:
    """
    Averages every voxel over the patches covering it.

    Sums and counts are accumulated in float64 and the result stays
    float64 with its sign, so residual-domain patches merge as well.
    """
    out_shape = tuple(int(n) for n in out_shape)
    total = np.zeros(out_shape, dtype=np.float64)
    count = np.zeros(out_shape, dtype=np.int64)

    for values, origin in patches:
        values = np.asarray(values)
        if any(o < 0 for o in origin) or any(
            o + p > n for o, p, n in zip(origin, values.shape, out_shape)
        ):
            raise ArgumentError(
                'Patch of shape {} at {} lies outside {}.'.format(values.shape, tuple(origin), out_shape)
            )
        window = _window(origin, values.shape)
        total[window] += values
        count[window] += 1

    holes = int(np.count_nonzero(count == 0))
    if holes:
        raise CoverageError(holes)
    return total / count


def merge_patches(
    patches: Iterable[Patch],
    out_shape: Sequence[int],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    drf=DoseLevel.FULL,
    volume_id: str = 'merged'
) -> Volume:
    """
    Merges activity patches into a validated `Volume`. Merging unmodified
    patches returns the source voxels exactly.
    """
    return Volume(
        voxels=average_patches(patches, out_shape).astype(np.float32),
        spacing=tuple(spacing),
        drf=drf,
        id=volume_id
    )


def random_origin(volume_shape: Sequence[int], patch_shape: Sequence[int], rng: np.random.Generator) -> Shape:
    _check_fits(volume_shape, patch_shape)
    return tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(volume_shape, patch_shape))


def random_crop_pair(low: Volume, std: Volume, patch_shape: Sequence[int], seed) -> PatchPair:
    """
    Crops `low` and `std` at the same origin, drawn uniformly over all
    valid positions.
    """
    if low.shape != std.shape:
        raise ArgumentError(
            'Cannot crop a pair with shapes {} and {}.'.format(low.shape, std.shape)
        )

    patch_shape = tuple(int(p) for p in patch_shape)
    origin = random_origin(low.shape, patch_shape, np.random.default_rng(seed))
    window = _window(origin, patch_shape)
    return PatchPair(
        low=low.voxels[window].copy(),
        std=std.voxels[window].copy(),
        origin=origin,
        subject=low.id,
        drf=low.drf
    )
