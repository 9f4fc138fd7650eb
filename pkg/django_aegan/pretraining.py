"""
Self-supervised pre-training of the Pixel-Net encoder.

Every source patch yields two views (rotation about the depth axis, then
a cutout perturbation). Both views go through the encoder and the four
heads: dose-reduction-level classification, rotation prediction,
contrastive coding and self-restoration.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from django_aegan.exceptions import ArgumentError, ConfigurationError, NumericError
from django_aegan.networks import (
    PIXEL_NET,
    SSP_HEADS,
    NetworkSpec,
    PixelNetEncoder,
    SSPHeads,
    build_pixel_net,
    build_ssp_heads,
    check_patch_shape,
    save_checkpoint,
)
from django_aegan.patches import random_crop_pair
from django_aegan.phantoms import derive_seed
from django_aegan.volumes import (
    SPLIT_TRAIN,
    DatasetManifest,
    DoseLevel,
    PathLike,
    load_volume,
    normalize_suv,
)


logger = logging.getLogger(__name__)

TASK_CLASSIFICATION = 'classification'
TASK_ROTATION = 'rotation'
TASK_CPC = 'cpc'
TASK_RESTORATION = 'restoration'
TASKS = (TASK_CLASSIFICATION, TASK_ROTATION, TASK_CPC, TASK_RESTORATION)

ENCODER = 'encoder'
HEADS = 'heads'

LOG_COLUMNS = {
    TASK_CLASSIFICATION: 'L_class',
    TASK_ROTATION: 'L_rot',
    TASK_CPC: 'L_CPC',
    TASK_RESTORATION: 'L_Res',
}

DRL_BUCKETS = {
    DoseLevel.DRF_4: 0,
    DoseLevel.DRF_10: 0,
    DoseLevel.DRF_20: 1,
    DoseLevel.DRF_50: 1,
    DoseLevel.DRF_100: 2,
}

MIN_CUTOUT_SIZE = 8


def drl_class_of(drf) -> int:
    drf = DoseLevel.parse(drf)
    if drf not in DRL_BUCKETS:
        raise ArgumentError('Full-dose volumes have no dose-reduction-level class.')
    return DRL_BUCKETS[drf]


def rotate_patch(p: np.ndarray, k: int) -> np.ndarray:
    """
    Rotates `p` by `k * 90` degrees in the `(x, y)` plane.
    """
    if p.ndim != 3 or p.shape[0] != p.shape[1]:
        raise ArgumentError('Rotation needs a square in-plane patch, got shape {}.'.format(p.shape))
    if k not in (0, 1, 2, 3):
        raise ArgumentError('Rotation class must be in 0..3, got {}.'.format(k))
    return np.ascontiguousarray(np.rot90(p, k, axes=(0, 1)))


Box = Tuple[Tuple[int, int, int], Tuple[int, int, int]]


@dataclass
class MaskRecord:
    dropout_mask: np.ndarray
    shuffle_boxes: List[Box] = field(default_factory=list)
    outpaint_mask: Optional[np.ndarray] = None

    @property
    def dropout_fraction(self) -> float:
        return float(self.dropout_mask.mean())

    def shuffle_mask(self) -> np.ndarray:
        mask = np.zeros_like(self.dropout_mask)
        for origin, size in self.shuffle_boxes:
            mask[_box(origin, size)] = True
        return mask

    def touched(self) -> np.ndarray:
        mask = self.dropout_mask | self.shuffle_mask()
        if self.outpaint_mask is not None:
            mask |= self.outpaint_mask
        return mask


def _box(origin: Sequence[int], size: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def _random_box(rng: np.random.Generator, shape: Sequence[int], low: Sequence[int], high: Sequence[int]) -> Box:
    size = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in zip(low, high))
    origin = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))
    return origin, size


def _drop_cuboids(rng: np.random.Generator, shape: Sequence[int], fraction: float, tolerance: float) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    total = mask.size
    low, high = fraction - tolerance, fraction + tolerance
    smallest = [max(1, n // 8) for n in shape]
    largest = [max(1, n // 3) for n in shape]

    for _ in range(200):
        origin, size = _random_box(rng, shape, smallest, largest)
        candidate = mask.copy()
        candidate[_box(origin, size)] = True
        if candidate.sum() <= high * total:
            mask = candidate
        if mask.sum() >= low * total:
            return mask

    # top up with single voxels once cuboids stop fitting
    missing = int(math.ceil(low * total)) - int(mask.sum())
    free = np.flatnonzero(~mask.ravel())
    mask.ravel()[rng.choice(free, size=missing, replace=False)] = True
    return mask


def cutout_perturb(
    p: np.ndarray,
    seed,
    dropout_fraction: float = 0.30,
    tolerance: float = 0.02,
    outpaint_probability: float = 0.5
) -> Tuple[np.ndarray, MaskRecord]:
    """
    Applies cuboid dropout, local shuffling on a disjoint region and, with
    probability `outpaint_probability`, noise over a border band. Voxels
    outside the returned `MaskRecord.touched()` are left bit-identical.
    """
    if p.ndim != 3 or min(p.shape) < MIN_CUTOUT_SIZE:
        raise ArgumentError('Cutout needs at least {} voxels per axis, got {}.'.format(MIN_CUTOUT_SIZE, p.shape))
    if not 0 < dropout_fraction < 1:
        raise ArgumentError('Dropout fraction must lie in (0, 1), got {}.'.format(dropout_fraction))

    rng = np.random.default_rng(seed)
    out = np.array(p, copy=True)

    dropout = _drop_cuboids(rng, p.shape, dropout_fraction, tolerance)
    out[dropout] = 0

    taken = dropout.copy()
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        for _attempt in range(20):
            origin, size = _random_box(rng, p.shape, [2] * 3, [max(2, n // 4) for n in p.shape])
            window = _box(origin, size)
            if not taken[window].any():
                region = out[window]
                out[window] = rng.permutation(region.ravel()).reshape(region.shape)
                taken[window] = True
                boxes.append((origin, size))
                break

    outpaint = None
    if rng.random() < outpaint_probability:
        band = max(1, min(p.shape) // 8)
        border = np.ones(p.shape, dtype=bool)
        border[band:-band, band:-band, band:-band] = False
        outpaint = border & ~taken
        low, high = float(p.min()), float(p.max())
        out[outpaint] = rng.uniform(low, high, size=int(outpaint.sum())).astype(out.dtype)

    return out, MaskRecord(dropout_mask=dropout, shuffle_boxes=boxes, outpaint_mask=outpaint)


@dataclass
class SSPView:
    patch: np.ndarray
    target: np.ndarray
    rotation_class: int
    drl_class: int
    mask_record: MaskRecord
    source_id: str = ''


def make_views(patch: np.ndarray, drf, seed, source_id: str = '', dropout_fraction: float = 0.30) -> Tuple[SSPView, SSPView]:
    """
    Builds the two views of one source patch. Each view is rotated first
    and then perturbed; its restoration target is the rotated patch.
    """
    drl = drl_class_of(drf)
    rng = np.random.default_rng(seed)

    views = []
    for _ in range(2):
        k = int(rng.integers(0, 4))
        rotated = rotate_patch(patch, k)
        perturbed, record = cutout_perturb(rotated, int(rng.integers(0, 2 ** 31)), dropout_fraction)
        views.append(SSPView(
            patch=perturbed,
            target=rotated,
            rotation_class=k,
            drl_class=drl,
            mask_record=record,
            source_id=source_id
        ))
    return views[0], views[1]


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError('{} contains non-finite values.'.format(name))


def _cross_entropy(logits, labels, classes: int) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=torch.float64 if not torch.is_tensor(logits) else None)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)

    if logits.shape[-1] != classes:
        raise ArgumentError('Expected {} logits, got {}.'.format(classes, logits.shape[-1]))
    if labels.numel() and (labels.min() < 0 or labels.max() >= classes):
        raise ArgumentError('Labels must lie in 0..{}, got {}.'.format(classes - 1, labels.tolist()))
    _check_finite(logits, 'Logits')
    return F.cross_entropy(logits, labels)


def loss_classification(logits, label) -> torch.Tensor:
    return _cross_entropy(logits, label, classes=3)


def loss_rotation(logits, label) -> torch.Tensor:
    return _cross_entropy(logits, label, classes=4)


def loss_cpc(codes, sigma: float = 0.5, partners: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    NT-Xent over `2N` codes. Unless `partners` says otherwise, the positive
    of code `i` is code `(i + N) mod 2N`; every other code is a negative.
    The loss is averaged over all `2N` anchors.
    """
    codes = torch.as_tensor(codes, dtype=torch.float64 if not torch.is_tensor(codes) else None)
    if sigma <= 0:
        raise ArgumentError('Contrastive temperature must be positive, got {}.'.format(sigma))
    if codes.dim() != 2 or codes.shape[0] < 2 or codes.shape[0] % 2:
        raise ArgumentError('Contrastive loss needs 2N codes with N >= 1, got shape {}.'.format(tuple(codes.shape)))
    _check_finite(codes, 'Codes')

    norms = codes.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise NumericError('Cannot normalize a zero-norm code.')

    count = codes.shape[0]
    if partners is None:
        positives = (torch.arange(count) + count // 2) % count
    else:
        positives = torch.as_tensor(list(partners), dtype=torch.long)
        if positives.numel() != count or (positives == torch.arange(count)).any():
            raise ArgumentError('Every code needs exactly one positive partner other than itself.')

    unit = codes / norms
    similarity = unit @ unit.t() / sigma
    diagonal = torch.eye(count, dtype=torch.bool, device=codes.device)
    similarity = similarity.masked_fill(diagonal, float('-inf'))
    return F.cross_entropy(similarity, positives.to(codes.device))


def loss_restoration(restored, original) -> torch.Tensor:
    restored = torch.as_tensor(restored)
    original = torch.as_tensor(original)
    if restored.shape != original.shape:
        raise ArgumentError('Restoration shapes differ: {} vs {}.'.format(tuple(restored.shape), tuple(original.shape)))
    return F.l1_loss(restored, original)


Parts = Union[Mapping[str, object], Sequence]


def ssp_total_loss(parts: Parts, lambdas: Sequence[float] = (1.0, 1.0, 1.0, 1.0)):
    """
    Weighted sum of the task losses. `parts` is either a mapping keyed by
    task name, where missing tasks contribute nothing, or four values in
    task order.
    """
    if not isinstance(parts, Mapping):
        parts = dict(zip(TASKS, parts))
    weights = dict(zip(TASKS, lambdas))

    total = 0.0
    for task, value in parts.items():
        if not math.isfinite(float(value)):
            raise NumericError('{} loss is not finite.'.format(task))
        total = total + weights[task] * value
    return total


@dataclass
class SSPConfig:
    lambdas: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    sigma: float = 0.5
    dropout_fraction: float = 0.30
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 5
    max_steps: Optional[int] = None
    seed: int = 0
    tasks: Tuple[str, ...] = TASKS
    log_every: int = 10
    device: str = 'cpu'
    patch_shape: Tuple[int, int, int] = (32, 32, 16)
    patches_per_volume: int = 4
    base_channels: int = 16
    depth_strides: Optional[Tuple[Tuple[int, int, int], ...]] = None
    suv_scale: float = 20.0

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.tasks = tuple(self.tasks)
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if self.depth_strides is not None:
            self.depth_strides = tuple(tuple(int(s) for s in level) for level in self.depth_strides)
        self.clean()

    def clean(self) -> None:
        if len(self.lambdas) != 4 or min(self.lambdas) < 0:
            raise ConfigurationError('SSP needs four non-negative weights, got {}.'.format(self.lambdas))
        if not self.sigma > 0:
            raise ConfigurationError('sigma must be positive, got {}.'.format(self.sigma))
        if not 0 < self.dropout_fraction < 1:
            raise ConfigurationError('dropout_fraction must lie in (0, 1), got {}.'.format(self.dropout_fraction))
        if self.batch_size < 1:
            raise ConfigurationError('batch_size must be positive, got {}.'.format(self.batch_size))
        unknown = set(self.tasks) - set(TASKS)
        if not self.tasks or unknown:
            raise ConfigurationError('Tasks must be a non-empty subset of {}, got {}.'.format(TASKS, self.tasks))
        if len(self.patch_shape) != 3 or self.patch_shape[0] != self.patch_shape[1]:
            raise ConfigurationError('Pre-training patches must be square in-plane, got {}.'.format(self.patch_shape))
        if min(self.patch_shape) < MIN_CUTOUT_SIZE:
            raise ConfigurationError('Pre-training patches need {} voxels per axis, got {}.'.format(
                MIN_CUTOUT_SIZE, self.patch_shape
            ))
        if not self.suv_scale > 0:
            raise ConfigurationError('suv_scale must be positive, got {}.'.format(self.suv_scale))

    def total_steps(self, dataset_size: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.epochs * max(1, math.ceil(dataset_size / self.batch_size))

    def encoder_spec(self) -> NetworkSpec:
        """
        Pixel-Net spec whose encoder is pre-trained; the generator that is
        warm-started later must use the same channels and strides.
        """
        spec = NetworkSpec(PIXEL_NET, self.base_channels, self.depth_strides or ())
        check_patch_shape(spec, self.patch_shape)
        return spec

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['lambdas'] = list(self.lambdas)
        data['tasks'] = list(self.tasks)
        data['patch_shape'] = list(self.patch_shape)
        if self.depth_strides is not None:
            data['depth_strides'] = [list(level) for level in self.depth_strides]
        return data


@dataclass
class SSPSample:
    patch: np.ndarray
    drf: DoseLevel
    source_id: str


def build_ssp_dataset(
    manifest: DatasetManifest,
    patch_shape: Sequence[int],
    suv_scale: float,
    patches_per_volume: int = 4,
    seed: int = 0,
    split: str = SPLIT_TRAIN
) -> List[SSPSample]:
    """
    Crops low-dose patches from every DRF of the `split` subjects.
    """
    samples = []
    for index, subject in enumerate(manifest.subjects(split)):
        for drf in sorted(manifest.entry(subject).low):
            low = normalize_suv(load_volume(manifest.low_path(subject, drf)), suv_scale)
            for n in range(patches_per_volume):
                pair = random_crop_pair(low, low, patch_shape, derive_seed(seed, index, drf, n))
                samples.append(SSPSample(
                    patch=pair.low,
                    drf=DoseLevel.parse(drf),
                    source_id='{}/drf{}/{}'.format(subject, drf, n)
                ))
    if not samples:
        raise ConfigurationError('No {} subjects to pre-train on.'.format(split))
    return samples


def _batch_tensor(arrays: Sequence[np.ndarray], device: str) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32)).to(device)


def pretrain(
    encoder: PixelNetEncoder,
    heads: SSPHeads,
    dataset: Sequence[SSPSample],
    cfg: SSPConfig
) -> Tuple[Dict[str, torch.Tensor], List[Dict]]:
    """
    Runs the pre-training loop and returns the encoder weights with the
    loss curve, one row per step holding the enabled task losses.
    """
    if not dataset:
        raise ConfigurationError('Cannot pre-train on an empty dataset.')

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    encoder.to(cfg.device).train()
    heads.to(cfg.device).train()
    optimizer = torch.optim.AdamW(
        list(encoder.parameters()) + list(heads.parameters()),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay
    )

    steps = cfg.total_steps(len(dataset))
    log = []
    for step in range(1, steps + 1):
        picks = rng.choice(len(dataset), size=cfg.batch_size, replace=len(dataset) < cfg.batch_size)
        first, second = [], []
        for element, index in enumerate(picks):
            sample = dataset[int(index)]
            a, b = make_views(
                sample.patch, sample.drf,
                seed=derive_seed(cfg.seed, step, element),
                source_id=sample.source_id,
                dropout_fraction=cfg.dropout_fraction
            )
            first.append(a)
            second.append(b)
        views = first + second

        features = encoder(_batch_tensor([v.patch for v in views], cfg.device))
        parts = {}
        if TASK_CLASSIFICATION in cfg.tasks:
            parts[TASK_CLASSIFICATION] = loss_classification(
                heads.drl(features), [v.drl_class for v in views]
            )
        if TASK_ROTATION in cfg.tasks:
            parts[TASK_ROTATION] = loss_rotation(
                heads.rotation(features), [v.rotation_class for v in views]
            )
        if TASK_CPC in cfg.tasks:
            parts[TASK_CPC] = loss_cpc(heads.cpc(features), cfg.sigma)
        if TASK_RESTORATION in cfg.tasks:
            parts[TASK_RESTORATION] = loss_restoration(
                heads.restore(features), _batch_tensor([v.target for v in views], cfg.device)
            )

        total = ssp_total_loss(parts, cfg.lambdas)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        row = {'step': step}
        row.update({LOG_COLUMNS[task]: float(value) for task, value in parts.items()})
        row['total'] = float(total)
        log.append(row)
        if step % cfg.log_every == 0 or step == steps:
            logger.info('SSP step %d/%d total=%.5f', step, steps, row['total'])

    state = {k: v.detach().cpu().clone() for k, v in encoder.state_dict().items()}
    return state, log


@dataclass
class PretrainingResult:
    encoder_state: Dict[str, torch.Tensor]
    log: List[Dict]
    checkpoint: Optional[Path] = None
    samples: int = 0


def pretrain_encoder(
    manifest: DatasetManifest,
    cfg: SSPConfig,
    checkpoint_path: Optional[PathLike] = None
) -> PretrainingResult:
    """
    Pre-trains a fresh Pixel-Net encoder on the training split of
    `manifest` and optionally saves it as a warm-start checkpoint, the
    weights stored under `ENCODER`.
    """
    spec = cfg.encoder_spec()
    dataset = build_ssp_dataset(
        manifest, cfg.patch_shape, cfg.suv_scale,
        patches_per_volume=cfg.patches_per_volume,
        seed=cfg.seed
    )
    logger.info('Pre-training on %d patches with tasks %s', len(dataset), ', '.join(cfg.tasks))

    torch.manual_seed(cfg.seed)
    encoder = build_pixel_net(spec).encoder
    heads = build_ssp_heads(spec)
    state, log = pretrain(encoder, heads, dataset, cfg)

    checkpoint = None
    if checkpoint_path:
        checkpoint = save_checkpoint(
            checkpoint_path,
            {ENCODER: encoder, HEADS: heads},
            {ENCODER: spec, HEADS: replace(spec, kind=SSP_HEADS)},
            tasks=list(cfg.tasks),
            config=cfg.to_dict(),
            steps=len(log)
        )
    return PretrainingResult(encoder_state=state, log=log, checkpoint=checkpoint, samples=len(dataset))
