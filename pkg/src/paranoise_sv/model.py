"""End-to-end ParaNoise-SV network: dual U-Nets followed by the speaker backbone."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .dual_unet import DualUNet, UNetConfig, UNetOutputs, Variant
from .sv_backbone import SpeakerEmbedding, SVBackbone, SVConfig


@dataclass
class ModelConfig:
    variant: Variant = Variant.ENC_ONLY
    unet: UNetConfig = field(default_factory=UNetConfig)
    sv: SVConfig = field(default_factory=SVConfig)
    n_mels: int = 64

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if isinstance(self.sv, dict):
            self.sv = SVConfig(**self.sv)

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        d["sv"]["stage_channels"] = [list(c) for c in self.sv.stage_channels]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))

    def structural_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tiny_model_config(variant=Variant.ENC_ONLY) -> ModelConfig:
    """Same topology at half width and one block per stage, for CPU smoke training."""
    return ModelConfig(
        variant=variant,
        unet=UNetConfig(encoder_channels=[8, 8, 16, 32, 64], decoder_channels=[32, 16, 8, 8, 1],
                        encoder_blocks=[1, 1, 1, 1], decoder_blocks=[1, 1, 1, 1], se_reduction=4),
        sv=SVConfig(stem_channels=8, stage_channels=[(8, 16), (16, 32), (32, 64), (64, 128)],
                    block_counts=[1, 1, 1, 1], asp_hidden=32),
    )


@dataclass
class ModelOutputs:
    noise: UNetOutputs | None
    speech: UNetOutputs
    embedding: SpeakerEmbedding

    @property
    def noise_estimate(self):
        return None if self.noise is None else self.noise.estimate

    @property
    def speech_estimate(self):
        return self.speech.estimate


class ParaNoiseSV(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.enhancer = DualUNet(cfg.unet, cfg.variant)
        self.sv = SVBackbone(cfg.sv, cfg.unet.encoder_channels, cfg.unet.decoder_channels[:4],
                             cfg.n_mels)

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    @property
    def ne(self):
        return self.enhancer.ne

    @property
    def se(self):
        return self.enhancer.se

    def forward(self, x) -> ModelOutputs:
        """``x``: normalized log-Mel batch ``[B, 64, T]`` or ``[B, 1, 64, T]``."""
        ne_out, se_out = self.enhancer(x)
        return ModelOutputs(noise=ne_out, speech=se_out, embedding=self.sv(se_out))

    @torch.no_grad()
    def embed(self, x) -> torch.Tensor:
        return self.forward(x).embedding.final


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
