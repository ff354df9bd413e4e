"""Multi-encoder 3D segmentation network with dilated residual blocks,
per-level fusion, a bottleneck correlation block and deep supervision."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ConcatFusion, DualFusion
from .correlation import CorrelationBlock, DEFAULT_PAIRS, ModalityPairing
from .errors import ConfigError, ShapeMismatchError

NEG_SLOPE = 0.01


@dataclass
class NetworkConfig:
    n_modalities: int = 4
    n_classes: int = 4
    base_filters: int = 8
    n_levels: int = 4
    dilation_rates: tuple[int, int] = (2, 4)
    lambda_corr: float = 0.1
    input_shape: tuple[int, int, int] = (128, 128, 128)
    use_fusion: bool = True
    use_correlation: bool = True
    pairs: str = DEFAULT_PAIRS

    def __post_init__(self):
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self):
        if self.base_filters < 1:
            raise ConfigError("base_filters must be >= 1")
        if self.n_levels < 2:
            raise ConfigError("n_levels must be >= 2")
        if self.n_modalities < 1 or self.n_classes < 2:
            raise ConfigError("need >= 1 modality and >= 2 classes")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must have three axes")
        div = self.divisor
        for s in self.input_shape:
            if s < div or s % div:
                raise ConfigError(
                    f"input_shape {self.input_shape} not divisible by 2^(n_levels-1) = {div}")
        if self.use_correlation:
            pairing = self.pairing()
            if any(max(p) >= self.n_modalities for p in pairing.pairs):
                raise ConfigError(f"pairing {self.pairs!r} refers to a missing modality")

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_levels - 1)

    def channels(self, level: int) -> int:
        return self.base_filters * 2 ** level

    def pairing(self) -> ModalityPairing:
        if self.pairs:
            return ModalityPairing.parse(self.pairs)
        return ModalityPairing.default(self.n_modalities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _init_conv(conv: nn.Conv3d) -> None:
    nn.init.kaiming_uniform_(conv.weight, a=NEG_SLOPE, nonlinearity="leaky_relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def _check_channels(x: torch.Tensor, expected: int) -> None:
    if x.dim() != 5 or x.shape[1] != expected:
        raise ShapeMismatchError(f"expected (B, {expected}, D, H, W), got {tuple(x.shape)}")


class ConvBlock(nn.Module):
    """3x3x3 conv -> instance norm -> LeakyReLU(0.01)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm3d(out_ch, affine=True)
        _init_conv(self.conv)

    def forward(self, x):
        _check_channels(x, self.in_ch)
        return F.leaky_relu(self.norm(self.conv(x)), NEG_SLOPE)


class ResDilBlock(nn.Module):
    """Residual block whose branch stacks two dilated 3x3x3 convolutions.

    branch = conv(d0) -> IN -> LReLU -> conv(d1) -> IN; out = LReLU(branch + shortcut).
    The shortcut is identity when channels match, a 1x1x1 conv otherwise.
    """

    def __init__(self, in_ch: int, out_ch: int, dilations: Sequence[int] = (2, 4)):
        super().__init__()
        d0, d1 = dilations
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=d0, dilation=d0)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=d1, dilation=d1)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, 1)
        for m in (self.conv1, self.conv2, self.shortcut):
            if isinstance(m, nn.Conv3d):
                _init_conv(m)

    def branch(self, x):
        y = F.leaky_relu(self.norm1(self.conv1(x)), NEG_SLOPE)
        return self.norm2(self.conv2(y))

    def forward(self, x):
        _check_channels(x, self.in_ch)
        return F.leaky_relu(self.branch(x) + self.shortcut(x), NEG_SLOPE)


class Encoder(nn.Module):
    """Single-modality encoder; returns one feature map per level, shallow to deep."""

    def __init__(self, config: NetworkConfig, in_ch: int = 1):
        super().__init__()
        self.levels = nn.ModuleList()
        prev = in_ch
        for level in range(config.n_levels):
            ch = config.channels(level)
            stride = 1 if level == 0 else 2
            self.levels.append(nn.Sequential(
                ConvBlock(prev, ch, stride=stride),
                ResDilBlock(ch, ch, config.dilation_rates),
            ))
            prev = ch

    def forward(self, x):
        feats = []
        for stage in self.levels:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Fuses encoder features level by level and emits summed deep-supervision logits.

    Bottom: fuse the N bottleneck maps, res_dil down to C_{L-1} channels.
    Level l < L-1: nearest x2 upsample -> conv C_{l+1} -> C_l -> fuse with the N
    encoder maps at that level (N+1 units) -> res_dil to C_l -> 1x1x1 class head,
    upsampled to full resolution. Output is the sum of all heads.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        n, L = config.n_modalities, config.n_levels
        fusion_cls = DualFusion if config.use_fusion else ConcatFusion
        c_bottom = config.channels(L - 1)
        self.bottom_fusion = fusion_cls(n, c_bottom)
        self.bottom_block = ResDilBlock(n * c_bottom, c_bottom, config.dilation_rates)
        self.up_convs = nn.ModuleList()
        self.fusions = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        # index k of these lists serves level L-2-k
        for level in range(L - 2, -1, -1):
            c = config.channels(level)
            self.up_convs.append(ConvBlock(config.channels(level + 1), c))
            self.fusions.append(fusion_cls(n + 1, c))
            self.blocks.append(ResDilBlock((n + 1) * c, c, config.dilation_rates))
            head = nn.Conv3d(c, config.n_classes, 1)
            _init_conv(head)
            self.heads.append(head)

    def forward(self, feats_per_level: Sequence[Sequence[torch.Tensor]]):
        """``feats_per_level[l]`` holds the N encoder maps at level l."""
        L = self.config.n_levels
        if len(feats_per_level) != L or any(
                len(f) != self.config.n_modalities for f in feats_per_level):
            raise ShapeMismatchError("decoder needs N feature maps at every level")
        x = self.bottom_block(self.bottom_fusion(feats_per_level[L - 1]))
        logits = None
        for k, level in enumerate(range(L - 2, -1, -1)):
            up = self.up_convs[k](F.interpolate(x, scale_factor=2, mode="nearest"))
            fused = self.fusions[k](list(feats_per_level[level]) + [up])
            x = self.blocks[k](fused)
            head = self.heads[k](x)
            if level:
                head = F.interpolate(head, scale_factor=2 ** level, mode="nearest")
            logits = head if logits is None else logits + head
        return logits

    def fusion_weights(self) -> dict[int, torch.Tensor]:
        L = self.config.n_levels
        out = {}
        if self.bottom_fusion.last_weights is not None:
            out[L - 1] = self.bottom_fusion.last_weights
        for k, level in enumerate(range(L - 2, -1, -1)):
            if self.fusions[k].last_weights is not None:
                out[level] = self.fusions[k].last_weights
        return out


class CorrSegNet(nn.Module):
    """N encoders + correlation block at the bottleneck + fusing decoder.

    ``forward`` takes (B, N, D, H, W) and returns (logits, Z, F): class logits,
    the N bottleneck maps and the estimated maps, one per modality pair
    (empty when the correlation block is disabled).
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleList(Encoder(config) for _ in range(config.n_modalities))
        self.decoder = Decoder(config)
        self.correlation = None
        if config.use_correlation:
            self.correlation = CorrelationBlock(config.channels(config.n_levels - 1),
                                                config.pairing())

    @classmethod
    def build(cls, config: NetworkConfig, seed: int = 0) -> "CorrSegNet":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(config)

    def forward(self, x: torch.Tensor):
        cfg = self.config
        if x.dim() != 5 or x.shape[1] != cfg.n_modalities:
            raise ShapeMismatchError(
                f"expected (B, {cfg.n_modalities}, D, H, W), got {tuple(x.shape)}")
        if any(s % cfg.divisor for s in x.shape[2:]):
            raise ShapeMismatchError(
                f"spatial dims {tuple(x.shape[2:])} not divisible by {cfg.divisor}")
        per_mod = [enc(x[:, m:m + 1]) for m, enc in enumerate(self.encoders)]
        feats_per_level = [[per_mod[m][lv] for m in range(cfg.n_modalities)]
                           for lv in range(cfg.n_levels)]
        z = feats_per_level[-1]
        f = self.correlation(z) if self.correlation is not None else []
        logits = self.decoder(feats_per_level)
        return logits, z, f


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
