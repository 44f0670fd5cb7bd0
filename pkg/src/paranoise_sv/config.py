"""Run configuration: nested YAML sections mapped onto dataclasses.

Every key has a default; unknown keys are rejected so typos fail loudly.
``PARANOISE_SEED`` and ``PARANOISE_OUT`` override ``seed`` and ``out_dir``.
"""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dual_unet import Variant
from .model import ModelConfig, tiny_model_config


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    weight_decay: float = 1e-4
    lr_peak: float = 0.01
    warmup_epochs: float = 5
    epochs: int = 200
    steps_per_epoch: int = 100
    betas: tuple = (0.9, 0.999)


@dataclass
class DataConfig:
    train_manifest: str = ""
    noise_manifest: str = ""
    trials: str = ""
    num_speakers: int = 8
    crop_seconds: float = 2.0
    noise_categories: tuple = ("babble", "music", "noise")
    speed_factors: tuple = (0.9, 1.0, 1.1)
    holdout_fraction: float = 0.05


@dataclass
class AugmentConfig:
    enabled: bool = True
    num_freq_masks: int = 1
    freq_mask_width: int = 8
    num_time_masks: int = 1
    time_mask_width: int = 10


@dataclass
class LossConfig:
    margin: float = 0.15
    scale: float = 32.0
    ap_init_w: float = 10.0
    ap_init_b: float = -5.0


@dataclass
class ValidationConfig:
    every_epochs: int = 1
    utterances_per_speaker: int = 4


@dataclass
class EvalConfig:
    conditions: tuple = ("clean", "babble", "music", "noise")
    snrs: tuple = (0, 5, 10, 15, 20)
    plot: bool = False


@dataclass
class RunConfig:
    variant: str = "enc_only"
    seed: int = 0
    out_dir: str = "runs/default"
    # "full" is the reference layer layout; "tiny" keeps the topology at
    # half width with one block per stage for CPU smoke runs
    model_preset: str = "full"
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        if self.model_preset not in ("full", "tiny"):
            raise ConfigError(f"unknown model_preset {self.model_preset!r}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")

    def model_config(self) -> ModelConfig:
        if self.model_preset == "tiny":
            return tiny_model_config(Variant(self.variant))
        return ModelConfig(variant=Variant(self.variant))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        default = fields[key].default_factory() if fields[key].default_factory \
            is not dataclasses.MISSING else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, copy.deepcopy(data or {}), "")


def load_config(path, env=None) -> RunConfig:
    env = os.environ if env is None else env
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    base = Path(path).resolve().parent
    for key in ("train_manifest", "noise_manifest", "trials"):
        p = (data.get("data") or {}).get(key)
        if p and not os.path.isabs(p):
            data["data"][key] = str(base / p)
    if "PARANOISE_SEED" in env:
        data["seed"] = int(env["PARANOISE_SEED"])
    if "PARANOISE_OUT" in env:
        data["out_dir"] = env["PARANOISE_OUT"]
    return from_dict(data)


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
