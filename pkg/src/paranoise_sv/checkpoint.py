"""Versioned checkpoint container with the wiring variant in its header."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .dual_unet import Variant
from .model import ModelConfig, ParaNoiseSV

FORMAT = "paranoise-sv-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def atomic_torch_save(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_checkpoint(path, model: ParaNoiseSV, run_config: dict | None = None, epoch: int = 0,
                    step: int = 0, loss_state=None, optimizer_state=None, extra=None):
    header = {
        "format": FORMAT,
        "version": VERSION,
        "variant": model.variant.value,
        "model_config": model.cfg.to_dict(),
        "structural_hash": model.cfg.structural_hash(),
        "run_config": run_config or {},
        "epoch": epoch,
        "step": step,
        "extra": extra or {},
    }
    atomic_torch_save({"header": header, "model": model.state_dict(), "loss": loss_state,
                       "optimizer": optimizer_state}, path)


def read_checkpoint(path) -> dict:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    header = blob.get("header", {}) if isinstance(blob, dict) else {}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return blob


def load_model(path, expected_variant=None) -> tuple[ParaNoiseSV, dict]:
    """Rebuild the network from the header and load its weights."""
    blob = read_checkpoint(path)
    header = blob["header"]
    cfg = ModelConfig.from_dict(header["model_config"])
    if cfg.variant.value != header["variant"]:
        raise CheckpointError("header variant disagrees with the stored model config")
    if expected_variant is not None and Variant(expected_variant) != cfg.variant:
        raise CheckpointError(
            f"checkpoint holds variant {cfg.variant.value}, expected {Variant(expected_variant).value}")
    if cfg.structural_hash() != header["structural_hash"]:
        raise CheckpointError("model config does not replay to the stored structure")
    model = ParaNoiseSV(cfg)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, blob
