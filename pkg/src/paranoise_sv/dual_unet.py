"""Noise-extraction and speech-enhancement U-Nets with parallel connections.

Both networks share one layout built from SE-ResNet blocks::

    C  : 1 -> 16                       (E0, full resolution)
    E1 : 16 -> 16   x3                 (full resolution)
    E2 : 16 -> 32   x4   stride 2
    E3 : 32 -> 64   x6   stride 2
    E4 : 64 -> 128  x3   stride 2      (deepest)
    D1 : up(E4) || E3 -> 64   x3
    D2 : up(D1) || E2 -> 32   x6
    D3 : up(D2) || E1 -> 16   x4
    D4 : D3 || E0     -> 16   x3
    T  : D4 || E0     -> 1    transposed conv

The SE network can additionally take NE features at each encoder stage input
(``enc``) and/or at each decoder stage input (``dec``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .features import pad_frames


class ContractViolation(ValueError):
    """Two feature maps that must line up do not."""


class WiringError(ValueError):
    """NE outputs supplied (or missing) inconsistently with the variant."""


class InputTooShortError(ValueError):
    pass


class Variant(str, enum.Enum):
    BASELINE_NO_NE = "baseline_no_ne"
    DEC_ONLY = "dec_only"
    ENC_DEC = "enc_dec"
    ENC_ONLY = "enc_only"

    @property
    def has_ne(self) -> bool:
        return self is not Variant.BASELINE_NO_NE

    @property
    def encoder_parallel(self) -> bool:
        return self in (Variant.ENC_DEC, Variant.ENC_ONLY)

    @property
    def decoder_parallel(self) -> bool:
        return self in (Variant.ENC_DEC, Variant.DEC_ONLY)


@dataclass
class UNetConfig:
    encoder_channels: list = field(default_factory=lambda: [16, 16, 32, 64, 128])
    decoder_channels: list = field(default_factory=lambda: [64, 32, 16, 16, 1])
    encoder_blocks: list = field(default_factory=lambda: [3, 4, 6, 3])
    decoder_blocks: list = field(default_factory=lambda: [3, 6, 4, 3])
    se_reduction: int = 8
    downsample_stages: list = field(default_factory=lambda: [2, 3, 4])

    def __post_init__(self):
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ValueError("depth must be 4: five encoder and five decoder channel entries")
        if len(self.encoder_blocks) != 4 or len(self.decoder_blocks) != 4:
            raise ValueError("need four block counts per path")
        if self.decoder_channels[-1] != 1:
            raise ValueError("final layer must emit one channel")
        for c in self.encoder_channels + self.decoder_channels[:-1]:
            if c % self.se_reduction:
                raise ValueError(f"channels {c} not divisible by se_reduction {self.se_reduction}")

    @property
    def depth(self) -> int:
        return 4

    @property
    def min_frames(self) -> int:
        return 2 ** len(self.downsample_stages)


def conv3x3(cin, cout, stride=1, bias=False):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)


def conv1x1(cin, cout, stride=1, bias=False):
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=bias)


class SqueezeExcitation(nn.Module):
    def __init__(self, channels, reduction=8):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))
        return s[:, :, None, None]

    def forward(self, x):
        return x * self.gate(x)


class SEResNetBlock(nn.Module):
    """Basic residual block whose residual branch is rescaled per channel by an SE gate."""

    def __init__(self, in_channels, out_channels, stride=1, reduction=8):
        super().__init__()
        self.conv1 = conv3x3(in_channels, out_channels, stride)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = conv3x3(out_channels, out_channels)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.se = SqueezeExcitation(out_channels, reduction)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                conv1x1(in_channels, out_channels, stride), nn.BatchNorm2d(out_channels)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        out = self.se(out)
        return torch.relu(out + self.shortcut(x))


class ParallelConcat(nn.Module):
    """Concatenate an NE feature onto an SE feature and project back to the SE width."""

    def __init__(self, channels, noise_channels=None):
        super().__init__()
        noise_channels = channels if noise_channels is None else noise_channels
        self.channels = channels
        self.noise_channels = noise_channels
        self.proj = conv1x1(channels + noise_channels, channels, bias=True)

    def forward(self, s, n):
        if s.shape[0] != n.shape[0] or s.shape[2:] != n.shape[2:]:
            raise ContractViolation(
                f"parallel connection shape mismatch: SE {tuple(s.shape)} vs NE {tuple(n.shape)}"
            )
        if s.shape[1] != self.channels or n.shape[1] != self.noise_channels:
            raise ContractViolation(
                f"expected {self.channels}/{self.noise_channels} channels, "
                f"got {s.shape[1]}/{n.shape[1]}"
            )
        return self.proj(torch.cat([s, n], dim=1))

    @torch.no_grad()
    def init_pass_through(self):
        """Set the projection to copy the SE channels and ignore the NE ones."""
        self.proj.weight.zero_()
        self.proj.bias.zero_()
        for c in range(self.channels):
            self.proj.weight[c, c, 0, 0] = 1.0


def _stack(in_ch, out_ch, count, stride, reduction):
    blocks = [SEResNetBlock(in_ch, out_ch, stride, reduction)]
    blocks += [SEResNetBlock(out_ch, out_ch, 1, reduction) for _ in range(count - 1)]
    return nn.Sequential(*blocks)


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, count, stride, reduction, parallel):
        super().__init__()
        self.fuse = ParallelConcat(in_ch) if parallel else None
        self.blocks = _stack(in_ch, out_ch, count, stride, reduction)

    def forward(self, x, noise=None):
        if self.fuse is not None:
            if noise is None:
                raise WiringError("encoder stage expects an NE feature")
            x = self.fuse(x, noise)
        elif noise is not None:
            raise WiringError("encoder stage has no parallel connection")
        return self.blocks(x)


class DecoderStage(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, count, upsample, reduction, parallel):
        super().__init__()
        self.fuse = ParallelConcat(in_ch) if parallel else None
        if upsample:
            self.up = nn.Sequential(
                nn.ConvTranspose2d(in_ch, in_ch, 3, stride=2, padding=1, output_padding=1,
                                   bias=False),
                nn.BatchNorm2d(in_ch),
                nn.ReLU(inplace=True),
            )
        else:
            self.up = None
        self.conv = nn.Sequential(
            conv3x3(in_ch + skip_ch, out_ch), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)
        )
        self.blocks = _stack(out_ch, out_ch, count, 1, reduction)

    def forward(self, x, skip, noise=None):
        if self.fuse is not None:
            if noise is None:
                raise WiringError("decoder stage expects an NE feature")
            x = self.fuse(x, noise)
        elif noise is not None:
            raise WiringError("decoder stage has no parallel connection")
        if self.up is not None:
            x = self.up(x)
        if x.shape[2:] != skip.shape[2:]:
            raise ContractViolation(
                f"skip connection mismatch: {tuple(x.shape)} vs {tuple(skip.shape)}"
            )
        return self.blocks(self.conv(torch.cat([x, skip], dim=1)))


@dataclass
class UNetOutputs:
    """Estimate plus every intermediate feature a sibling network may consume.

    ``estimate`` is cropped back to the input length; ``padded_estimate`` and all
    feature maps keep the padded length (a multiple of 8 frames).
    """

    estimate: torch.Tensor
    padded_estimate: torch.Tensor
    encoder_feats: list
    decoder_feats: list
    valid_frames: int

    @property
    def deepest(self) -> torch.Tensor:
        return self.encoder_feats[-1]


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig | None = None, parallel_encoder=False,
                 parallel_decoder=False):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        self.parallel_encoder = parallel_encoder
        self.parallel_decoder = parallel_decoder
        enc, dec, r = cfg.encoder_channels, cfg.decoder_channels, cfg.se_reduction

        self.stem = nn.Sequential(conv3x3(1, enc[0]), nn.BatchNorm2d(enc[0]), nn.ReLU(inplace=True))
        self.encoder = nn.ModuleList(
            EncoderStage(enc[i - 1], enc[i], cfg.encoder_blocks[i - 1],
                         2 if i in cfg.downsample_stages else 1, r, parallel_encoder)
            for i in range(1, 5)
        )

        # decoder step i reads skip E_{4-i}; it upsamples when that skip sits one
        # resolution level above the incoming feature
        scale = [0] * 5
        for i in range(1, 5):
            scale[i] = scale[i - 1] + (1 if i in cfg.downsample_stages else 0)
        self.decoder = nn.ModuleList()
        d_in = enc[4]
        level = scale[4]
        for i in range(1, 5):
            skip = 4 - i
            upsample = scale[skip] < level
            self.decoder.append(DecoderStage(d_in, enc[skip], dec[i - 1],
                                             cfg.decoder_blocks[i - 1], upsample, r,
                                             parallel_decoder))
            level = scale[skip]
            d_in = dec[i - 1]
        self.final = nn.ConvTranspose2d(dec[3] + enc[0], dec[4], 3, stride=1, padding=1)

    def forward(self, x, noise: UNetOutputs | None = None) -> UNetOutputs:
        """Run on a normalized spectrogram ``[B, 1, 64, T]``.

        ``noise`` carries the NE outputs for the parallel connections and must be
        given exactly when this network was built with any of them.
        """
        wants_noise = self.parallel_encoder or self.parallel_decoder
        if wants_noise and noise is None:
            raise WiringError("this network needs NE outputs")
        if not wants_noise and noise is not None:
            raise WiringError("this network has no parallel connections")
        if x.dim() == 3:
            x = x.unsqueeze(1)
        t = x.shape[-1]
        if t < self.cfg.min_frames:
            raise InputTooShortError(f"need at least {self.cfg.min_frames} frames, got {t}")
        x, valid = pad_frames(x, self.cfg.min_frames)
        if noise is not None and noise.encoder_feats[0].shape[-1] != x.shape[-1]:
            raise ContractViolation("NE outputs were computed on a different length")

        feats = [self.stem(x)]
        for i, stage in enumerate(self.encoder):
            n = noise.encoder_feats[i] if self.parallel_encoder else None
            feats.append(stage(feats[-1], n))

        d = feats[-1]
        dec_feats = []
        for i, stage in enumerate(self.decoder):
            # NE decoder input at the same step: N_{D,0} = N_{E,4}, then N_{D,i}
            n = None
            if self.parallel_decoder:
                n = noise.encoder_feats[-1] if i == 0 else noise.decoder_feats[i - 1]
            d = stage(d, feats[3 - i], n)
            dec_feats.append(d)

        padded = self.final(torch.cat([d, feats[0]], dim=1))
        return UNetOutputs(
            estimate=padded[..., :valid],
            padded_estimate=padded,
            encoder_feats=feats,
            decoder_feats=dec_feats,
            valid_frames=valid,
        )


class DualUNet(nn.Module):
    """NE and SE U-Nets wired according to a :class:`Variant`."""

    def __init__(self, cfg: UNetConfig | None = None, variant=Variant.ENC_ONLY):
        super().__init__()
        self.variant = Variant(variant)
        self.ne = UNet(cfg) if self.variant.has_ne else None
        self.se = UNet(cfg, parallel_encoder=self.variant.encoder_parallel,
                       parallel_decoder=self.variant.decoder_parallel)

    def forward(self, x):
        ne_out = self.ne(x) if self.ne is not None else None
        return ne_out, self.se(x, ne_out)
