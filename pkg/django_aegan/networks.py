"""
Declarative construction of the generator, the residual estimator, the
discriminator and the pre-training heads, plus checkpoint helpers.

All networks take tensors laid out as `(batch, channel, x, y, z)`; the
depth axis `z` is the last one, so per-level strides read `(sx, sy, sz)`.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from django_aegan.exceptions import CheckpointError, ResolutionError, SpecError
from django_aegan.volumes import PathLike


logger = logging.getLogger(__name__)

Stride = Tuple[int, int, int]

PIXEL_NET = 'pixel_net'
AE_NET = 'ae_net'
DISCRIMINATOR = 'discriminator'
SSP_HEADS = 'ssp_heads'
NETWORK_KINDS = (PIXEL_NET, AE_NET, DISCRIMINATOR, SSP_HEADS)

LEVELS = {PIXEL_NET: 5, AE_NET: 4, DISCRIMINATOR: 5, SSP_HEADS: 5}

DEFAULT_STRIDES = {
    PIXEL_NET: ((2, 2, 2),) * 4 + ((2, 2, 1),),
    AE_NET: ((2, 2, 2),) * 4,
    DISCRIMINATOR: ((2, 2, 2),) * 4 + ((2, 2, 1),),
    SSP_HEADS: ((2, 2, 2),) * 4 + ((2, 2, 1),),
}

DRL_CLASSES = 3
ROTATION_CLASSES = 4
CPC_DIMENSION = 512


@dataclass
class NetworkSpec:
    kind: str
    base_channels: int = 16
    depth_strides: Tuple[Stride, ...] = ()
    in_channels: int = 0
    negative_slope: float = 0.2
    out_channels: int = 1
    disc_output: str = 'mean'

    def __post_init__(self):
        if self.kind not in NETWORK_KINDS:
            raise SpecError('Unknown network kind {!r}.'.format(self.kind))
        if not self.depth_strides:
            self.depth_strides = DEFAULT_STRIDES[self.kind]
        if not self.in_channels:
            self.in_channels = 2 if self.kind == DISCRIMINATOR else 1
        self.depth_strides = tuple(tuple(int(s) for s in level) for level in self.depth_strides)
        self.clean()

    def clean(self) -> None:
        if self.base_channels < 1:
            raise SpecError('base_channels must be at least 1, got {}.'.format(self.base_channels))
        if len(self.depth_strides) != LEVELS[self.kind]:
            raise SpecError('{} needs {} stride levels, got {}.'.format(
                self.kind, LEVELS[self.kind], len(self.depth_strides)
            ))
        for level in self.depth_strides:
            if len(level) != 3 or min(level) < 1:
                raise SpecError('Invalid stride level {} in {}.'.format(level, self.kind))
        if self.negative_slope < 0:
            raise SpecError('negative_slope must be non-negative, got {}.'.format(self.negative_slope))
        if self.disc_output not in ('mean', 'map'):
            raise SpecError('disc_output must be "mean" or "map", got {!r}.'.format(self.disc_output))

    @property
    def total_stride(self) -> Stride:
        total = [1, 1, 1]
        for level in self.depth_strides:
            total = [t * s for t, s in zip(total, level)]
        return tuple(total)

    def encoder_channels(self) -> List[int]:
        c = self.base_channels
        return [c, 2 * c, 4 * c, 8 * c, 8 * c]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['depth_strides'] = [list(level) for level in self.depth_strides]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'NetworkSpec':
        return cls(**data)

    def encoder_signature(self) -> Tuple:
        """
        Fields that determine the layout of a Pixel-Net encoder.
        """
        return (self.base_channels, self.depth_strides, self.in_channels, self.negative_slope)


def check_patch_shape(spec: NetworkSpec, patch_shape: Sequence[int]) -> None:
    """
    Raises `SpecError` unless every level of `spec` divides the patch
    exactly, so decoders restore the input shape.
    """
    sizes = [int(n) for n in patch_shape]
    for depth, level in enumerate(spec.depth_strides, start=1):
        for axis, (n, s) in enumerate(zip(sizes, level)):
            if n < s or n % s:
                raise SpecError(
                    'Level {} stride {} does not divide axis {} of size {} (patch {}).'.format(
                        depth, level, axis, n, tuple(patch_shape)
                    )
                )
        sizes = [n // s for n, s in zip(sizes, level)]


def _conv(cin: int, cout: int, stride: Stride, bias: bool) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=bias)


def _up_conv(cin: int, cout: int, stride: Stride, bias: bool) -> nn.ConvTranspose3d:
    return nn.ConvTranspose3d(
        cin, cout,
        kernel_size=3,
        stride=stride,
        padding=1,
        output_padding=tuple(s - 1 for s in stride),
        bias=bias
    )


def init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm3d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class PixelNetEncoder(nn.Module):

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        channels = spec.encoder_channels()
        strides = spec.depth_strides
        slope = spec.negative_slope

        blocks = [_conv(spec.in_channels, channels[0], strides[0], bias=True)]
        for i in range(1, 4):
            blocks.append(nn.Sequential(
                nn.LeakyReLU(slope),
                _conv(channels[i - 1], channels[i], strides[i], bias=False),
                nn.BatchNorm3d(channels[i]),
            ))
        blocks.append(nn.Sequential(
            nn.LeakyReLU(slope),
            _conv(channels[3], channels[4], strides[4], bias=True),
        ))
        self.blocks = nn.ModuleList(blocks)
        self.channels = channels

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return features


class PixelNetDecoder(nn.Module):
    """
    Mirrors `PixelNetEncoder`; level `i` consumes the previous decoder
    output concatenated with encoder level `i`.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.encoder_channels()
        strides = spec.depth_strides

        # (in, out) per level, deepest first
        widths = [
            (c[4], c[3]),
            (2 * c[3], c[2]),
            (2 * c[2], c[1]),
            (2 * c[1], c[0]),
        ]
        blocks = []
        for (cin, cout), stride in zip(widths, reversed(strides[1:])):
            blocks.append(nn.Sequential(
                nn.ReLU(),
                _up_conv(cin, cout, stride, bias=False),
                nn.BatchNorm3d(cout),
            ))
        blocks.append(nn.Sequential(
            nn.ReLU(),
            _up_conv(2 * c[0], spec.out_channels, strides[0], bias=True),
        ))
        self.blocks = nn.ModuleList(blocks)
        self.channels = c

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != len(self.channels):
            raise SpecError('Decoder expects {} feature maps, got {}.'.format(len(self.channels), len(features)))

        x = self.blocks[0](features[-1])
        for block, skip in zip(self.blocks[1:], reversed(features[:-1])):
            x = block(torch.cat([x, skip], dim=1))
        return x


class PixelNet(nn.Module):

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = PixelNetEncoder(spec)
        self.decoder = PixelNetDecoder(spec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class AENet(nn.Module):
    """
    V-shaped residual estimator: four Conv-BN-LeakyReLU blocks with max
    pooling, four upsampling Conv-BN-ReLU blocks and a linear 1x1x1 head.
    The output is unbounded; in AE mode it multiplies the difference map
    voxelwise, in AR mode it is added to the first-stage synthesis.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        down = [(spec.in_channels, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)]
        up = [(8 * c, 4 * c), (4 * c, 2 * c), (2 * c, c), (c, c)]

        self.down = nn.ModuleList([
            nn.Sequential(
                nn.Conv3d(cin, cout, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm3d(cout),
                nn.LeakyReLU(spec.negative_slope),
                nn.MaxPool3d(kernel_size=stride, stride=stride),
            )
            for (cin, cout), stride in zip(down, spec.depth_strides)
        ])
        self.up = nn.ModuleList([
            nn.Sequential(
                _up_conv(cin, cout, stride, bias=True),
                nn.Conv3d(cout, cout, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm3d(cout),
                nn.ReLU(),
            )
            for (cin, cout), stride in zip(up, reversed(spec.depth_strides))
        ])
        self.head = nn.Conv3d(c, spec.out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.down:
            x = block(x)
        for block in self.up:
            x = block(x)
        return self.head(x)


class Discriminator(nn.Module):
    """
    Scores a `(low-dose, candidate)` pair. Each block is Conv-LeakyReLU-BN
    except the last one, where a sigmoid replaces the activation.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        widths = [(spec.in_channels, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)]

        blocks = [
            nn.Sequential(
                _conv(cin, cout, stride, bias=True),
                nn.LeakyReLU(spec.negative_slope),
                nn.BatchNorm3d(cout),
            )
            for (cin, cout), stride in zip(widths, spec.depth_strides)
        ]
        blocks.append(nn.Sequential(
            _conv(8 * c, 1, spec.depth_strides[4], bias=True),
            nn.Sigmoid(),
        ))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, low: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return self.blocks(torch.cat([low, candidate], dim=1))

    def score(self, low: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        """
        Returns one score per pair (`disc_output == 'mean'`) or the
        flattened score map per pair (`'map'`).
        """
        scores = self(low, candidate).flatten(start_dim=1)
        if self.spec.disc_output == 'mean':
            return scores.mean(dim=1)
        return scores


def _global_pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3, 4))


class SSPHeads(nn.Module):

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        channels = spec.encoder_channels()
        bottleneck = channels[-1]

        self.drl_head = nn.Sequential(
            nn.Linear(sum(channels), bottleneck),
            nn.LeakyReLU(spec.negative_slope),
            nn.Linear(bottleneck, DRL_CLASSES),
        )
        self.rotation_head = nn.Linear(bottleneck, ROTATION_CLASSES)
        self.cpc_head = nn.Linear(bottleneck, CPC_DIMENSION)
        self.restoration_decoder = PixelNetDecoder(spec)
        self.channels = channels

    def _check(self, features: Sequence[torch.Tensor]) -> None:
        found = [f.shape[1] for f in features]
        if found != self.channels:
            raise SpecError('Encoder channels {} do not match the heads {}.'.format(found, self.channels))

    def drl(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        self._check(features)
        return self.drl_head(torch.cat([_global_pool(f) for f in features], dim=1))

    def rotation(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        self._check(features)
        return self.rotation_head(_global_pool(features[-1]))

    def cpc(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        self._check(features)
        return self.cpc_head(_global_pool(features[-1]))

    def restore(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        self._check(features)
        return self.restoration_decoder(features)

    def forward(self, features: Sequence[torch.Tensor]) -> Dict[str, torch.Tensor]:
        return {
            'drl': self.drl(features),
            'rotation': self.rotation(features),
            'cpc': self.cpc(features),
            'restoration': self.restore(features),
        }


def _require(spec: NetworkSpec, *kinds: str) -> None:
    if spec.kind not in kinds:
        raise SpecError('Expected a {} spec, got {!r}.'.format(' or '.join(kinds), spec.kind))


def build_pixel_net(spec: NetworkSpec) -> PixelNet:
    _require(spec, PIXEL_NET)
    net = PixelNet(spec)
    net.apply(init_weights)
    return net


def build_ae_net(spec: NetworkSpec, head_bias: float = 1.0) -> AENet:
    """
    `head_bias` 1 starts a multiplicative gate open; an additive
    correction (AR mode) wants 0.
    """
    _require(spec, AE_NET)
    net = AENet(spec)
    net.apply(init_weights)
    nn.init.constant_(net.head.bias, head_bias)
    return net


def build_discriminator(spec: NetworkSpec) -> Discriminator:
    _require(spec, DISCRIMINATOR)
    net = Discriminator(spec)
    net.apply(init_weights)
    return net


def build_ssp_heads(encoder_spec: NetworkSpec) -> SSPHeads:
    _require(encoder_spec, PIXEL_NET, SSP_HEADS)
    heads = SSPHeads(encoder_spec)
    heads.apply(init_weights)
    return heads


BUILDERS = {
    PIXEL_NET: build_pixel_net,
    AE_NET: build_ae_net,
    DISCRIMINATOR: build_discriminator,
    SSP_HEADS: build_ssp_heads,
}


def build_network(spec: NetworkSpec) -> nn.Module:
    return BUILDERS[spec.kind](spec)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def save_checkpoint(
    path: PathLike,
    networks: Dict[str, nn.Module],
    specs: Dict[str, NetworkSpec],
    **extra
) -> Path:
    """
    Writes one file holding every network's weights next to a copy of
    its spec and parameter count. `extra` must be plain data or tensors.
    """
    path = Path(path)
    payload = {
        'format': 1,
        'specs': {name: spec.to_dict() for name, spec in specs.items()},
        'state': {name: net.state_dict() for name, net in networks.items()},
        'parameters': {name: count_parameters(net) for name, net in networks.items()},
    }
    payload.update(extra)
    torch.save(payload, str(path))
    logger.info('Saved checkpoint %s (%s)', path, ', '.join(sorted(networks)))
    return path


def load_checkpoint(path: PathLike) -> Dict:
    path = Path(path)
    if not path.exists():
        raise ResolutionError('Checkpoint {} does not exist.'.format(path))
    try:
        payload = torch.load(str(path), map_location='cpu')
    except Exception as e:
        raise CheckpointError('Cannot read checkpoint {}: {}'.format(path, e))

    if not isinstance(payload, dict) or payload.get('format') != 1:
        raise CheckpointError('{} is not a checkpoint written by this app.'.format(path))
    return payload


def checkpoint_spec(payload: Dict, name: str) -> NetworkSpec:
    try:
        return NetworkSpec.from_dict(payload['specs'][name])
    except KeyError:
        raise CheckpointError('Checkpoint holds no {!r} network.'.format(name))


def restore_network(payload: Dict, name: str, expected: Optional[NetworkSpec] = None) -> nn.Module:
    """
    Rebuilds network `name` from a loaded checkpoint, refusing it when the
    embedded spec differs from `expected`.
    """
    spec = checkpoint_spec(payload, name)
    if expected is not None and spec != expected:
        raise CheckpointError('Checkpoint spec for {!r} is {}, expected {}.'.format(
            name, spec.to_dict(), expected.to_dict()
        ))
    net = build_network(spec)
    net.load_state_dict(payload['state'][name])
    return net


def load_encoder_weights(net: PixelNet, payload: Dict, name: str = 'encoder') -> None:
    """
    Warm-starts the encoder of `net` from a pre-training checkpoint.
    """
    spec = checkpoint_spec(payload, name)
    if spec.encoder_signature() != net.spec.encoder_signature():
        raise CheckpointError(
            'Pretrained encoder {} is incompatible with {}.'.format(spec.to_dict(), net.spec.to_dict())
        )
    try:
        net.encoder.load_state_dict(payload['state'][name])
    except RuntimeError as e:
        raise CheckpointError('Cannot load pretrained encoder: {}'.format(e))
