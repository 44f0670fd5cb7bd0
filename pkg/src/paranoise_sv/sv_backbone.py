"""Multi-scale speaker backbone fed by the enhanced spectrogram and SE decoder features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .dual_unet import ContractViolation, UNetOutputs, conv1x1, conv3x3


@dataclass
class SVConfig:
    stem_channels: int = 16
    stage_channels: list = field(default_factory=lambda: [(16, 32), (32, 64), (64, 128), (128, 256)])
    block_counts: list = field(default_factory=lambda: [3, 4, 6, 3])
    scale: int = 2
    res2net_base_width: int = 32
    eres2netv2_base_width: int = 64
    aff_reduction: int = 4
    embedding_dim: int = 192
    asp_hidden: int = 64
    ca_layers: int = 2
    # SE decoder stage (0 = D1 .. 3 = D4) feeding S1..S4, matched by resolution
    se_sources: list = field(default_factory=lambda: [3, 2, 1, 0])

    def __post_init__(self):
        self.stage_channels = [tuple(c) for c in self.stage_channels]
        for cin, cout in self.stage_channels:
            if cout != 2 * cin:
                raise ValueError(f"stage must double channels, got {cin}->{cout}")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if a[1] != b[0]:
                raise ValueError("stage channels do not chain")
        if self.stage_channels[0][0] != self.stem_channels:
            raise ValueError("first stage must start at the stem width")
        if self.ca_layers < 1:
            raise ValueError("ca_layers must be positive")


@dataclass
class SpeakerEmbedding:
    initial: torch.Tensor  # [B, embedding_dim]
    final: torch.Tensor  # [B, embedding_dim]
    pooled_initial: torch.Tensor  # [B, 2 * D]


class ChannelAdapt(nn.Module):
    """1x1 convolutions mapping an SE decoder feature to an SV stage width."""

    def __init__(self, in_channels, target_channels, layers=2):
        super().__init__()
        mods = []
        c = in_channels
        for i in range(layers):
            mods.append(conv1x1(c, target_channels, bias=True))
            if i < layers - 1:
                mods.append(nn.ReLU(inplace=True))
            c = target_channels
        self.net = nn.Sequential(*mods)
        self.target_channels = target_channels

    def forward(self, f, reference=None):
        if reference is not None and f.shape[2:] != reference.shape[2:]:
            raise ContractViolation(
                f"channel adaptation input {tuple(f.shape)} not aligned with {tuple(reference.shape)}"
            )
        return self.net(f)


class AFF(nn.Module):
    """Attentional gate ``s * a + (1 - s) * b`` with ``s`` computed from both inputs.

    ``a`` is the (optionally restructured) shallow input and ``b`` the deep one.
    When the shallow input has a different width or twice the resolution, a
    strided 3x3 convolution brings it onto the deep input's grid first.
    """

    def __init__(self, channels, reduction=4, shallow_channels=None, stride=1):
        super().__init__()
        shallow_channels = channels if shallow_channels is None else shallow_channels
        if shallow_channels != channels or stride != 1:
            self.restructure = nn.Sequential(
                conv3x3(shallow_channels, channels, stride), nn.BatchNorm2d(channels)
            )
        else:
            self.restructure = nn.Identity()
        inter = max(channels // reduction, 1)
        self.attention = nn.Sequential(
            conv1x1(2 * channels, inter, bias=True),
            nn.BatchNorm2d(inter),
            nn.SiLU(inplace=True),
            conv1x1(inter, channels, bias=True),
            nn.BatchNorm2d(channels),
        )

    def forward(self, shallow, deep):
        a = self.restructure(shallow)
        if a.shape != deep.shape:
            raise ContractViolation(f"AFF inputs {tuple(a.shape)} vs {tuple(deep.shape)}")
        gate = torch.sigmoid(self.attention(torch.cat([a, deep], dim=1)))
        return gate * a + (1.0 - gate) * deep


class Res2NetBlock(nn.Module):
    """Channel-split block: group i sees its own slice plus group i-1's output.

    The post-addition ReLU means the identity property under zeroed internals
    holds for non-negative inputs, which is what stacked blocks receive.
    """

    expansion = 2

    def __init__(self, in_channels, out_channels, stride=1, scale=2, base_width=32,
                 use_aff=False, aff_reduction=4):
        super().__init__()
        planes = out_channels // self.expansion
        width = int(math.floor(planes * base_width / 64.0))
        if scale < 1 or width < 1 or out_channels % self.expansion:
            raise ValueError(
                f"cannot split {out_channels} channels into {scale} groups (width {width})")
        self.width = width
        self.scale = scale
        self.conv1 = conv1x1(in_channels, width * scale, stride)
        self.bn1 = nn.BatchNorm2d(width * scale)
        self.convs = nn.ModuleList(conv3x3(width, width) for _ in range(scale))
        self.bns = nn.ModuleList(nn.BatchNorm2d(width) for _ in range(scale))
        self.fuse = (nn.ModuleList(AFF(width, aff_reduction) for _ in range(scale - 1))
                     if use_aff else None)
        self.conv3 = conv1x1(width * scale, out_channels)
        self.bn3 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                conv1x1(in_channels, out_channels, stride), nn.BatchNorm2d(out_channels)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        groups = torch.split(out, self.width, dim=1)
        outs = []
        sp = None
        for i, g in enumerate(groups):
            if sp is None:
                sp = g
            elif self.fuse is not None:
                sp = self.fuse[i - 1](sp, g)
            else:
                sp = sp + g
            sp = torch.relu(self.bns[i](self.convs[i](sp)))
            outs.append(sp)
        out = self.bn3(self.conv3(torch.cat(outs, dim=1)))
        return torch.relu(out + self.shortcut(x))


class ERes2NetV2Block(Res2NetBlock):
    """Res2Net block with a widened split and AFF in place of additive group fusion."""

    def __init__(self, in_channels, out_channels, stride=1, scale=2, base_width=64,
                 aff_reduction=4):
        super().__init__(in_channels, out_channels, stride, scale, base_width,
                         use_aff=True, aff_reduction=aff_reduction)


class AttentiveStatsPool(nn.Module):
    """Attention-weighted mean and standard deviation over time.

    Frames are ``C*F``-dimensional vectors; a tanh bottleneck scores each frame
    and a softmax over time turns the scores into weights.
    """

    def __init__(self, in_dim, hidden=64, eps=1e-10):
        super().__init__()
        self.attention = nn.Sequential(
            nn.Conv1d(in_dim, hidden, 1), nn.Tanh(), nn.Conv1d(hidden, 1, 1)
        )
        self.eps = eps
        self.in_dim = in_dim

    def forward(self, x, valid_frames=None):
        if x.dim() == 4:
            x = x.flatten(1, 2)
        if valid_frames is not None:
            x = x[..., :valid_frames]
        if x.shape[1] != self.in_dim:
            raise ContractViolation(f"expected {self.in_dim}-dim frames, got {x.shape[1]}")
        alpha = torch.softmax(self.attention(x), dim=-1)
        mean = (alpha * x).sum(dim=-1)
        var = (alpha * x * x).sum(dim=-1) - mean * mean
        # exact zero for a single frame, finite gradient everywhere
        positive = var > self.eps
        std = torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))),
                          torch.zeros_like(var))
        return torch.cat([mean, std], dim=1)


class BottomUpFusion(AFF):
    """Restructure a stage-3 map onto the stage-4 grid and gate the two together."""

    def __init__(self, s3_channels, s4_channels, reduction=4):
        super().__init__(s4_channels, reduction, shallow_channels=s3_channels, stride=2)

    def forward(self, s3, s4):
        if s3.shape[-2] != 2 * s4.shape[-2] or s3.shape[-1] != 2 * s4.shape[-1]:
            raise ContractViolation(
                f"stage-3 {tuple(s3.shape)} is not twice the grid of stage-4 {tuple(s4.shape)}")
        return super().forward(s3, s4)


class SVStage(nn.Module):
    def __init__(self, in_ch, out_ch, count, stride, se_channels, cfg: SVConfig, eres2netv2):
        super().__init__()
        self.adapt = ChannelAdapt(se_channels, in_ch, cfg.ca_layers)
        self.fuse = nn.Sequential(conv1x1(2 * in_ch, in_ch), nn.BatchNorm2d(in_ch),
                                  nn.ReLU(inplace=True))
        if eres2netv2:
            make = lambda i, o, s: ERes2NetV2Block(i, o, s, cfg.scale, cfg.eres2netv2_base_width,
                                                   cfg.aff_reduction)
        else:
            make = lambda i, o, s: Res2NetBlock(i, o, s, cfg.scale, cfg.res2net_base_width)
        blocks = [make(in_ch, out_ch, stride)]
        blocks += [make(out_ch, out_ch, 1) for _ in range(count - 1)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x, se_feat):
        adapted = self.adapt(se_feat, reference=x)
        return self.blocks(self.fuse(torch.cat([x, adapted], dim=1)))


class SVBackbone(nn.Module):
    """Two-stage embedding extractor.

    The initial path pools the deepest SE encoder feature; the final path runs
    the enhanced spectrogram through S1-S4 (each stage taking a channel-adapted
    SE decoder feature at its input resolution), fuses S3 into S4, pools again
    and projects ``[pooled_final || pooled_initial]`` to the embedding.
    """

    def __init__(self, cfg: SVConfig, se_encoder_channels, se_decoder_channels, n_mels=64):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.stem = nn.Sequential(conv3x3(1, cfg.stem_channels), nn.BatchNorm2d(cfg.stem_channels),
                                  nn.ReLU(inplace=True))

        strides = [1, 2, 2, 2]
        self.sources = list(cfg.se_sources)
        self.stages = nn.ModuleList(
            SVStage(cin, cout, n, s, se_decoder_channels[src], cfg, eres2netv2=k >= 2)
            for k, ((cin, cout), n, s, src) in enumerate(
                zip(chans, cfg.block_counts, strides, self.sources))
        )
        self.bottom_up = BottomUpFusion(chans[2][1], chans[3][1], cfg.aff_reduction)

        deep_freq = n_mels // 8
        init_dim = se_encoder_channels[-1] * deep_freq
        final_dim = chans[3][1] * deep_freq
        self.pool_initial = AttentiveStatsPool(init_dim, cfg.asp_hidden)
        self.fc_initial = nn.Linear(2 * init_dim, cfg.embedding_dim)
        self.pool_final = AttentiveStatsPool(final_dim, cfg.asp_hidden)
        self.fc_final = nn.Linear(2 * final_dim + 2 * init_dim, cfg.embedding_dim)

    def initial_embedding(self, se_out: UNetOutputs):
        valid = math.ceil(se_out.valid_frames / 8)
        pooled = self.pool_initial(se_out.deepest, valid)
        return pooled, self.fc_initial(pooled)

    def forward(self, se_out: UNetOutputs) -> SpeakerEmbedding:
        pooled_initial, initial = self.initial_embedding(se_out)

        x = self.stem(se_out.padded_estimate)
        outs = []
        for stage, src in zip(self.stages, self.sources):
            x = stage(x, se_out.decoder_feats[src])
            outs.append(x)
        fused = self.bottom_up(outs[2], outs[3])
        pooled = self.pool_final(fused, math.ceil(se_out.valid_frames / 8))
        final = self.fc_final(torch.cat([pooled, pooled_initial], dim=1))
        return SpeakerEmbedding(initial=initial, final=final, pooled_initial=pooled_initial)


