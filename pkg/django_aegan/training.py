"""
End-to-end training of Pixel-Net, AE-Net and the discriminator, plus
whole-volume inference.

Inside the training loop every tensor is in the normalized SUV domain
(`suv / suv_scale`). Inference takes and returns SUV volumes.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from django_aegan.evaluation import kfold_split, psnr
from django_aegan.exceptions import ArgumentError, CheckpointError, ConfigurationError, NumericError
from django_aegan.networks import (
    AE_NET,
    DISCRIMINATOR,
    PIXEL_NET,
    AENet,
    Discriminator,
    NetworkSpec,
    PixelNet,
    build_ae_net,
    build_discriminator,
    build_pixel_net,
    check_patch_shape,
    load_checkpoint,
    load_encoder_weights,
    restore_network,
    save_checkpoint,
)
from django_aegan.patches import PatchGridSpec, extract_patches, merge_patches, random_crop_pair
from django_aegan.phantoms import derive_seed
from django_aegan.volumes import (
    SPLIT_TRAIN,
    SPLIT_VAL,
    DatasetManifest,
    DoseLevel,
    PathLike,
    Volume,
    normalize_suv,
)


logger = logging.getLogger(__name__)

RESIDUAL_AE = 'AE'
RESIDUAL_AR = 'AR'
RESIDUAL_NONE = 'none'
RESIDUAL_MODES = (RESIDUAL_AE, RESIDUAL_AR, RESIDUAL_NONE)

DRF_MIX_PRESETS: Dict[str, Tuple[int, ...]] = {
    '4-20': (4, 10, 20),
    '10-50': (10, 20, 50),
    '10-100': (10, 20, 50, 100),
    '4-100': (4, 10, 20, 50, 100),
    '4': (4,),
    '10': (10,),
    '20': (20,),
    '50': (50,),
    '100': (100,),
}

ABLATIONS: Dict[str, Dict] = {
    'pix': {'residual_mode': RESIDUAL_NONE, 'use_discriminator': False},
    'pix_ae': {'residual_mode': RESIDUAL_AE, 'use_discriminator': False},
    'pix_dis': {'residual_mode': RESIDUAL_NONE, 'use_discriminator': True},
    'full': {'residual_mode': RESIDUAL_AE, 'use_discriminator': True},
    'ar': {'residual_mode': RESIDUAL_AR, 'use_discriminator': True},
    'scratch': {'pretrained_encoder': None},
}


def resolve_drf_mix(value: Union[str, Sequence]) -> Tuple[DoseLevel, ...]:
    """
    Accepts a preset name such as `'10-100'` or an explicit list of DRFs.
    """
    if isinstance(value, str):
        if value not in DRF_MIX_PRESETS:
            raise ConfigurationError('Unknown DRF mix preset {!r}; choose one of {}.'.format(
                value, sorted(DRF_MIX_PRESETS)
            ))
        value = DRF_MIX_PRESETS[value]

    mix = tuple(sorted({DoseLevel.parse(v) for v in value}))
    if not mix or DoseLevel.FULL in mix:
        raise ConfigurationError('DRF mix must list reduced dose levels, got {}.'.format(list(value)))
    return mix


@dataclass
class TrainConfig:
    lambda_content: float = 300.0
    lambda_residual: float = 10.0
    lambda_adversarial: float = 1.0
    residual_mode: str = RESIDUAL_AE
    use_discriminator: bool = True
    lr0: float = 2e-4
    lr_decay_factor: float = 0.1
    lr_patience_epochs: int = 5
    lr_stop_threshold: float = 2e-6
    max_epochs: int = 100
    batch_size: int = 4
    drf_mix: Union[str, Tuple[int, ...]] = '4-100'
    pretrained_encoder: Optional[str] = None
    seed: int = 0
    patch_shape: Tuple[int, int, int] = (32, 32, 16)
    stride: Tuple[int, int, int] = (16, 16, 8)
    base_channels: int = 16
    depth_strides: Optional[Tuple[Tuple[int, int, int], ...]] = None
    steps_per_epoch: Optional[int] = None
    max_steps: Optional[int] = None
    suv_scale: float = 20.0
    deterministic: bool = False
    disc_output: str = 'mean'
    cv_folds: Optional[int] = None
    val_patches: int = 2
    device: str = 'cpu'

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        self.stride = tuple(int(s) for s in self.stride)
        if self.depth_strides is not None:
            self.depth_strides = tuple(tuple(int(s) for s in level) for level in self.depth_strides)
        self.clean()

    def clean(self) -> None:
        if min(self.lambda_content, self.lambda_residual, self.lambda_adversarial) < 0:
            raise ConfigurationError('Loss weights must be non-negative.')
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigurationError('residual_mode must be one of {}, got {!r}.'.format(
                RESIDUAL_MODES, self.residual_mode
            ))
        if not self.lr0 > self.lr_stop_threshold > 0:
            raise ConfigurationError('Learning rates must satisfy lr0 > lr_stop_threshold > 0.')
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigurationError('lr_decay_factor must lie in (0, 1), got {}.'.format(self.lr_decay_factor))
        if self.lr_patience_epochs < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError('Patience, epochs and batch size must be positive.')
        if not self.suv_scale > 0:
            raise ConfigurationError('suv_scale must be positive, got {}.'.format(self.suv_scale))
        if self.cv_folds is not None and self.cv_folds < 2:
            raise ConfigurationError('cv_folds must be at least 2, got {}.'.format(self.cv_folds))
        resolve_drf_mix(self.drf_mix)
        PatchGridSpec(self.patch_shape, self.stride)

    @property
    def drfs(self) -> Tuple[DoseLevel, ...]:
        return resolve_drf_mix(self.drf_mix)

    @property
    def grid(self) -> PatchGridSpec:
        return PatchGridSpec(self.patch_shape, self.stride)

    def with_ablation(self, name: str) -> 'TrainConfig':
        if name not in ABLATIONS:
            raise ConfigurationError('Unknown ablation {!r}; choose one of {}.'.format(name, sorted(ABLATIONS)))
        return replace(self, **ABLATIONS[name])

    def network_specs(self) -> Dict[str, NetworkSpec]:
        strides = self.depth_strides or ()
        specs = {PIXEL_NET: NetworkSpec(PIXEL_NET, self.base_channels, strides)}
        if self.residual_mode != RESIDUAL_NONE:
            ae_strides = strides[:4] if strides else ()
            specs[AE_NET] = NetworkSpec(AE_NET, self.base_channels, ae_strides)
        if self.use_discriminator:
            specs[DISCRIMINATOR] = NetworkSpec(
                DISCRIMINATOR, self.base_channels, strides, disc_output=self.disc_output
            )
        for spec in specs.values():
            check_patch_shape(spec, self.patch_shape)
        return specs

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key in ('patch_shape', 'stride'):
            data[key] = list(data[key])
        if self.depth_strides is not None:
            data['depth_strides'] = [list(level) for level in self.depth_strides]
        if not isinstance(self.drf_mix, str):
            data['drf_mix'] = [int(d) for d in self.drf_mix]
        return data


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ArgumentError('{} shapes differ: {} vs {}.'.format(what, tuple(a.shape), tuple(b.shape)))


def content_loss(p_out: torch.Tensor, v_s: torch.Tensor) -> torch.Tensor:
    _check_shapes(p_out, v_s, 'Content loss')
    return F.l1_loss(p_out, v_s)


def residual_target(v_s, v_l):
    """
    Residual `r` such that `v_l + r == v_s`.
    """
    _check_shapes(v_s, v_l, 'Residual target')
    return v_s - v_l


@dataclass
class ResidualBundle:
    mode: str
    p_out: torch.Tensor
    refined: torch.Tensor
    r_tilde: Optional[torch.Tensor] = None
    gate: Optional[torch.Tensor] = None


def refine(p_out, v_l, ae_net: Optional[nn.Module], mode: str, scale: float = 1.0) -> ResidualBundle:
    """
    Second-stage synthesis.

    `AE`: the estimator gates the difference map, `gate * (p_out - v_l) + v_l`.
    `AR`: the estimator reads `p_out` and predicts an additive correction.
    `none`: `p_out` is the final synthesis.

    `scale` is the SUV normalization of the inputs; the estimator always
    runs on normalized values.
    """
    if mode not in RESIDUAL_MODES:
        raise ArgumentError('Unknown residual mode {!r}.'.format(mode))
    _check_shapes(p_out, v_l, 'Refinement')

    if mode == RESIDUAL_NONE:
        return ResidualBundle(mode, p_out, refined=p_out)
    if ae_net is None:
        raise ArgumentError('Residual mode {} needs an estimator network.'.format(mode))

    if mode == RESIDUAL_AE:
        r_tilde = p_out - v_l
        gate = ae_net(r_tilde / scale)
        return ResidualBundle(mode, p_out, refined=gate * r_tilde + v_l, r_tilde=r_tilde, gate=gate)

    gate = ae_net(p_out / scale) * scale
    return ResidualBundle(mode, p_out, refined=p_out + gate, gate=gate)


def residual_loss(bundle: ResidualBundle, v_s, v_l) -> torch.Tensor:
    if bundle.mode == RESIDUAL_NONE:
        raise ConfigurationError('Residual loss is undefined without a residual estimator.')
    if bundle.mode == RESIDUAL_AE:
        return torch.mean(torch.abs(residual_target(v_s, v_l) - bundle.gate * bundle.r_tilde))
    return torch.mean(torch.abs(residual_target(v_s, bundle.p_out) - bundle.gate))


def _finite_scores(scores: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(scores).all():
        raise NumericError('Discriminator produced non-finite scores.')
    return scores


def discriminator_loss(disc, v_l, v_s, refined) -> torch.Tensor:
    real = _finite_scores(disc.score(v_l, v_s))
    fake = _finite_scores(disc.score(v_l, refined.detach()))
    return torch.mean((real - 1) ** 2) + torch.mean(fake ** 2)


def generator_adversarial_loss(disc, v_l, refined) -> torch.Tensor:
    fake = _finite_scores(disc.score(v_l, refined))
    return torch.mean((fake - 1) ** 2)


def adversarial_losses(disc, v_l, v_s, refined) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Least-squares objectives, returned as `(d_loss, g_loss)`.
    """
    return discriminator_loss(disc, v_l, v_s, refined), generator_adversarial_loss(disc, v_l, refined)


def total_generator_loss(
    parts: Mapping[str, object],
    lambda_content: float = 300.0,
    lambda_residual: float = 10.0,
    lambda_adversarial: float = 1.0
):
    """
    Weighted sum of the `content`, `residual` and `adversarial` parts. A
    part that is missing or `None` is left out.
    """
    weights = {
        'content': lambda_content,
        'residual': lambda_residual,
        'adversarial': lambda_adversarial,
    }
    total = 0.0
    for name, weight in weights.items():
        value = parts.get(name)
        if value is not None:
            total = total + weight * value
    return total


@dataclass
class LRState:
    lr: float
    lr0: float
    best: float = math.inf
    stale: int = 0
    reductions: int = 0
    stop: bool = False

    @classmethod
    def start(cls, lr0: float) -> 'LRState':
        return cls(lr=lr0, lr0=lr0)


def lr_schedule_step(
    state: LRState,
    val_loss: float,
    factor: float = 0.1,
    patience: int = 5,
    threshold: float = 2e-6
) -> LRState:
    """
    Reduce-on-plateau: after `patience` epochs without a lower validation
    loss the rate becomes `lr0 * factor ** k`; training stops once it
    falls below `threshold`.
    """
    best, stale, reductions = state.best, state.stale, state.reductions
    if val_loss < best:
        best, stale = val_loss, 0
    else:
        stale += 1

    if stale >= patience:
        reductions += 1
        stale = 0

    lr = state.lr0 * factor ** reductions
    return LRState(
        lr=lr,
        lr0=state.lr0,
        best=best,
        stale=stale,
        reductions=reductions,
        stop=lr < threshold * (1 - 1e-9)
    )


def _to_tensor(arrays: Sequence[np.ndarray], device: str) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32)).to(device)


class PairSampler:
    """
    Serves normalized `(low, std)` patch batches from the training split.

    The crop of batch element `e` in batch `b` of epoch `t` is drawn from
    `derive_seed(seed, t, b, e)` alone.
    """

    def __init__(self, manifest: DatasetManifest, cfg: TrainConfig, split: str = SPLIT_TRAIN):
        self.cfg = cfg
        self.pairs: List[Tuple[Volume, Volume]] = []

        subjects = manifest.subjects(split)
        for drf in cfg.drfs:
            having = [s for s in subjects if int(drf) in manifest.entry(s).low]
            if not having:
                raise ConfigurationError('No {} subject has a DRF {} volume.'.format(split, int(drf)))
            for subject in having:
                low, full = manifest.load_pair(subject, drf)
                self.pairs.append((normalize_suv(low, cfg.suv_scale), normalize_suv(full, cfg.suv_scale)))

    def __len__(self) -> int:
        return len(self.pairs)

    def drfs(self) -> List[int]:
        return sorted({int(low.drf) for low, _ in self.pairs})

    def batch(self, epoch: int, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        lows, stds = [], []
        for element in range(self.cfg.batch_size):
            seed = derive_seed(self.cfg.seed, epoch, index, element)
            low, full = self.pairs[int(np.random.default_rng(seed).integers(len(self.pairs)))]
            pair = random_crop_pair(low, full, self.cfg.patch_shape, seed)
            lows.append(pair.low)
            stds.append(pair.std)
        return _to_tensor(lows, self.cfg.device), _to_tensor(stds, self.cfg.device)

    def fixed_batch(self, count: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        `count` crops per pair at seed-fixed origins, for validation.
        """
        lows, stds = [], []
        for i, (low, full) in enumerate(self.pairs):
            for n in range(count):
                pair = random_crop_pair(low, full, self.cfg.patch_shape, derive_seed(self.cfg.seed, i, n))
                lows.append(pair.low)
                stds.append(pair.std)
        return _to_tensor(lows, self.cfg.device), _to_tensor(stds, self.cfg.device)


class GanTrainer:

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)
        torch.manual_seed(cfg.seed)

        self.specs = cfg.network_specs()
        self.pixel_net: PixelNet = build_pixel_net(self.specs[PIXEL_NET]).to(cfg.device)
        self.ae_net: Optional[AENet] = None
        self.discriminator: Optional[Discriminator] = None
        if AE_NET in self.specs:
            head_bias = 1.0 if cfg.residual_mode == RESIDUAL_AE else 0.0
            self.ae_net = build_ae_net(self.specs[AE_NET], head_bias).to(cfg.device)
        if DISCRIMINATOR in self.specs:
            self.discriminator = build_discriminator(self.specs[DISCRIMINATOR]).to(cfg.device)

        if cfg.pretrained_encoder:
            load_encoder_weights(self.pixel_net, load_checkpoint(cfg.pretrained_encoder))
            logger.info('Warm-started the Pixel-Net encoder from %s', cfg.pretrained_encoder)

        generator_params = list(self.pixel_net.parameters())
        if self.ae_net is not None:
            generator_params += list(self.ae_net.parameters())
        self.opt_g = torch.optim.Adam(generator_params, lr=cfg.lr0, betas=(0.5, 0.999))
        self.opt_d = None
        if self.discriminator is not None:
            self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.lr0, betas=(0.5, 0.999))

        self.lr_state = LRState.start(cfg.lr0)
        self.step = 0
        self.step_log: List[Dict] = []

    @property
    def networks(self) -> Dict[str, nn.Module]:
        nets = {PIXEL_NET: self.pixel_net, AE_NET: self.ae_net, DISCRIMINATOR: self.discriminator}
        return {name: net for name, net in nets.items() if net is not None}

    def _mode(self, training: bool) -> None:
        for net in self.networks.values():
            net.train(training)

    def set_lr(self, lr: float) -> None:
        for optimizer in (self.opt_g, self.opt_d):
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group['lr'] = lr

    def train_step(self, low: torch.Tensor, std: torch.Tensor) -> Dict[str, float]:
        """
        One discriminator update followed by one generator update.
        """
        self._mode(True)
        cfg = self.cfg
        row = {}

        p_out = self.pixel_net(low)
        bundle = refine(p_out, low, self.ae_net, cfg.residual_mode)

        parts = {'content': content_loss(p_out, std)}
        if cfg.residual_mode != RESIDUAL_NONE:
            parts['residual'] = residual_loss(bundle, std, low)

        if self.discriminator is not None:
            d_loss = discriminator_loss(self.discriminator, low, std, bundle.refined)
            self.opt_d.zero_grad()
            d_loss.backward()
            self.opt_d.step()
            parts['adversarial'] = generator_adversarial_loss(self.discriminator, low, bundle.refined)
            row['d_loss'] = float(d_loss)
            row['g_loss'] = float(parts['adversarial'])

        total = total_generator_loss(parts, cfg.lambda_content, cfg.lambda_residual, cfg.lambda_adversarial)
        if not torch.isfinite(total):
            raise NumericError('Generator loss diverged at step {}.'.format(self.step + 1))
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()

        self.step += 1
        row['L_content'] = float(parts['content'])
        if 'residual' in parts:
            row['L_residual'] = float(parts['residual'])
        row['total'] = float(total)
        self.step_log.append(dict(step=self.step, **row))
        return row

    @torch.no_grad()
    def validate(self, low: torch.Tensor, std: torch.Tensor) -> Tuple[float, float]:
        """
        Returns the L1 loss and PSNR of the refined synthesis on a fixed
        validation batch.
        """
        self._mode(False)
        bundle = refine(self.pixel_net(low), low, self.ae_net, self.cfg.residual_mode)
        loss = float(F.l1_loss(bundle.refined, std))
        score = psnr(std.cpu().numpy(), bundle.refined.clamp(min=0).cpu().numpy())
        return loss, score

    def log_columns(self) -> List[str]:
        columns = ['epoch', 'lr', 'L_content']
        if self.cfg.residual_mode != RESIDUAL_NONE:
            columns.append('L_residual')
        if self.discriminator is not None:
            columns += ['d_loss', 'g_loss']
        return columns + ['val_loss', 'val_psnr']

    def step_columns(self) -> List[str]:
        columns = ['step']
        if self.discriminator is not None:
            columns += ['d_loss', 'g_loss']
        columns.append('L_content')
        if self.cfg.residual_mode != RESIDUAL_NONE:
            columns.append('L_residual')
        return columns + ['total']

    def fit(self, sampler: PairSampler, validation: Tuple[torch.Tensor, torch.Tensor]) -> List[Dict]:
        cfg = self.cfg
        steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(len(sampler) / cfg.batch_size))
        columns = self.log_columns()
        log = []

        for epoch in range(1, cfg.max_epochs + 1):
            rows = []
            for index in range(steps_per_epoch):
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    break
                rows.append(self.train_step(*sampler.batch(epoch, index)))
            if not rows:
                break

            val_loss, val_psnr = self.validate(*validation)
            row = {'epoch': epoch, 'lr': self.lr_state.lr}
            for key in columns:
                if key in rows[0]:
                    row[key] = float(np.mean([r[key] for r in rows]))
            row['val_loss'] = val_loss
            row['val_psnr'] = val_psnr
            log.append({key: row[key] for key in columns})
            logger.info(
                'Epoch %d lr=%.2e content=%.5f val_loss=%.5f val_psnr=%.2f',
                epoch, row['lr'], row['L_content'], val_loss, val_psnr
            )

            self.lr_state = lr_schedule_step(
                self.lr_state, val_loss,
                factor=cfg.lr_decay_factor,
                patience=cfg.lr_patience_epochs,
                threshold=cfg.lr_stop_threshold
            )
            if self.lr_state.stop:
                logger.info('Learning rate fell below %.1e, stopping after epoch %d', cfg.lr_stop_threshold, epoch)
                break
            self.set_lr(self.lr_state.lr)
        return log

    def save(self, path: PathLike, **extra) -> Path:
        optimizers = {'generator': self.opt_g.state_dict()}
        if self.opt_d is not None:
            optimizers['discriminator'] = self.opt_d.state_dict()
        return save_checkpoint(
            path,
            self.networks,
            self.specs,
            residual_mode=self.cfg.residual_mode,
            suv_scale=self.cfg.suv_scale,
            grid=self.cfg.grid.to_dict(),
            config=self.cfg.to_dict(),
            optimizers=optimizers,
            steps=self.step,
            **extra
        )

    def infer(self, v_l: Volume, grid: Optional[PatchGridSpec] = None) -> Volume:
        return _infer(self.pixel_net, self.ae_net, self.cfg.residual_mode, v_l, grid or self.cfg.grid, self.cfg.suv_scale)


@dataclass
class TrainingResult:
    trainer: GanTrainer
    log: List[Dict]
    checkpoint: Optional[Path] = None
    drfs: List[int] = field(default_factory=list)


def train(manifest: DatasetManifest, cfg: TrainConfig, checkpoint_path: Optional[PathLike] = None) -> TrainingResult:
    sampler = PairSampler(manifest, cfg, SPLIT_TRAIN)
    validation = PairSampler(manifest, cfg, SPLIT_VAL).fixed_batch(cfg.val_patches)
    logger.info('Training on %d pairs from DRFs %s', len(sampler), sampler.drfs())

    trainer = GanTrainer(cfg)
    log = trainer.fit(sampler, validation)
    checkpoint = None
    if checkpoint_path:
        checkpoint = trainer.save(checkpoint_path, scanner_profile=manifest.metadata.get('scanner_profile', ''))
    return TrainingResult(trainer=trainer, log=log, checkpoint=checkpoint, drfs=sampler.drfs())


def train_cross_validation(manifest: DatasetManifest, cfg: TrainConfig, out_dir: PathLike) -> List[TrainingResult]:
    """
    Trains one model per fold over the pooled train and val subjects and
    writes `folds.json` next to the fold checkpoints.
    """
    out_dir = Path(out_dir)
    pool = sorted(manifest.subjects(SPLIT_TRAIN) + manifest.subjects(SPLIT_VAL))
    folds = kfold_split(len(pool), cfg.cv_folds, cfg.seed)

    results, summary = [], []
    for number, (train_ids, val_ids) in enumerate(folds, start=1):
        split = dict(manifest.split)
        split.update({pool[i]: SPLIT_TRAIN for i in train_ids})
        split.update({pool[i]: SPLIT_VAL for i in val_ids})
        fold_manifest = replace(manifest, split=split)

        path = out_dir / 'fold{}.pt'.format(number)
        result = train(fold_manifest, cfg, path)
        results.append(result)
        summary.append({
            'fold': number,
            'checkpoint': path.name,
            'train': [pool[i] for i in train_ids],
            'val': [pool[i] for i in val_ids],
        })
        logger.info('Finished fold %d/%d', number, len(folds))

    (out_dir / 'folds.json').write_text(json.dumps(summary, indent=2), encoding='utf-8')
    return results


@torch.no_grad()
def _infer(
    pixel_net: PixelNet,
    ae_net: Optional[AENet],
    mode: str,
    v_l: Volume,
    grid: PatchGridSpec,
    suv_scale: float,
    batch_size: int = 4
) -> Volume:
    check_patch_shape(pixel_net.spec, grid.patch_shape)
    pixel_net.eval()
    if ae_net is not None:
        ae_net.eval()
    device = next(pixel_net.parameters()).device

    patches = extract_patches(v_l, grid)
    outputs = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        low = _to_tensor([p for p, _ in chunk], str(device))
        p_out = pixel_net(low / suv_scale) * suv_scale
        refined = refine(p_out, low, ae_net, mode, scale=suv_scale).refined.clamp(min=0)
        for values, (_, origin) in zip(refined[:, 0].cpu().numpy(), chunk):
            outputs.append((values, origin))

    return merge_patches(outputs, v_l.shape, v_l.spacing, v_l.drf, v_l.id)


def infer_volume(checkpoint, v_l: Volume, grid: Optional[PatchGridSpec] = None, suv_scale: Optional[float] = None) -> Volume:
    """
    Synthesizes a standard-dose estimate of `v_l` from a checkpoint path
    or an already loaded checkpoint payload.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    pixel_net = restore_network(payload, PIXEL_NET)
    mode = payload.get('residual_mode', RESIDUAL_NONE)
    ae_net = restore_network(payload, AE_NET) if mode != RESIDUAL_NONE else None

    if grid is None:
        if 'grid' not in payload:
            raise CheckpointError('Checkpoint stores no patch grid; pass one explicitly.')
        grid = PatchGridSpec(**payload['grid'])
    return _infer(pixel_net, ae_net, mode, v_l, grid, suv_scale or payload.get('suv_scale', 1.0))
