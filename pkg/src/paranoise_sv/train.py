"""Joint training loop, learning-rate schedule and validation-based checkpoint selection."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .datapipe import (AudioCache, BatchConfig, Trial, batch_seed, build_batch, featurize_batch,
                       group_by, read_manifest)
from .evaluation import Condition, run_trials
from .features import FrontendConfig, SpecAugmentPolicy
from .losses import AAMConfig, JointLoss, NonFiniteLossError
from .model import ParaNoiseSV

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def learning_rate(epoch_pos: float, peak: float, warmup_epochs: float, total_epochs: float) -> float:
    """Linear warm-up to ``peak`` at ``warmup_epochs``, then cosine annealing to 0."""
    if epoch_pos <= warmup_epochs:
        return peak * max(epoch_pos, 0.0) / warmup_epochs if warmup_epochs > 0 else peak
    span = max(total_epochs - warmup_epochs, 1e-12)
    progress = min((epoch_pos - warmup_epochs) / span, 1.0)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


def split_speakers(records, fraction, rng: np.random.Generator):
    speakers = sorted({r.speaker_id for r in records})
    n_hold = int(round(fraction * len(speakers)))
    held = set(rng.choice(speakers, size=n_hold, replace=False).tolist()) if n_hold else set()
    return [r for r in records if r.speaker_id not in held], [r for r in records if r.speaker_id in held]


def pair_trials(records, per_speaker: int | None = None) -> list[Trial]:
    """All unordered pairs over (at most ``per_speaker`` utterances of) each speaker."""
    chosen = []
    for spk, recs in sorted(group_by(records, "speaker_id").items()):
        chosen.extend(sorted(recs, key=lambda r: r.utterance_id)[:per_speaker])
    return [Trial(int(a.speaker_id == b.speaker_id), a.audio_path, b.audio_path)
            for a, b in itertools.combinations(chosen, 2)]


@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path
    totals: list = field(default_factory=list)
    history: list = field(default_factory=list)


def _set_determinism(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def train(cfg: RunConfig, resume=None) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    _set_determinism(cfg.seed)

    records = read_manifest(cfg.data.train_manifest, min_duration_s=cfg.data.crop_seconds / 2)
    noise = read_manifest(cfg.data.noise_manifest)
    train_recs, held = split_speakers(records, cfg.data.holdout_fraction,
                                      np.random.default_rng([cfg.seed, 7]))
    # too few held-out speakers for trials: validate on the training speakers
    val_recs = held if len({r.speaker_id for r in held}) >= 2 else train_recs
    val_trials = pair_trials(val_recs, cfg.validation.utterances_per_speaker)
    speakers = sorted({r.speaker_id for r in train_recs})
    speaker_index = {s: i for i, s in enumerate(speakers)}

    model_cfg = cfg.model_config()
    model = ParaNoiseSV(model_cfg)
    criterion = JointLoss(model_cfg.sv.embedding_dim,
                          AAMConfig(cfg.loss.margin, cfg.loss.scale, len(speakers)),
                          cfg.loss.ap_init_w, cfg.loss.ap_init_b)
    params = list(model.parameters()) + list(criterion.parameters())
    optimizer = torch.optim.Adam(params, lr=0.0, betas=tuple(cfg.optim.betas),
                                 weight_decay=cfg.optim.weight_decay)

    start_epoch = 0
    best_eer = math.inf
    if resume is not None:
        blob = read_checkpoint(resume)
        header = blob["header"]
        if header["structural_hash"] != model_cfg.structural_hash():
            raise CheckpointError("resume checkpoint was built from a different model config")
        if header["extra"].get("speakers") != speakers:
            raise CheckpointError("resume checkpoint was trained on a different speaker set")
        model.load_state_dict(blob["model"])
        criterion.load_state_dict(blob["loss"])
        optimizer.load_state_dict(blob["optimizer"])
        start_epoch = header["epoch"] + 1
        best_eer = header["extra"].get("best_eer", math.inf)

    frontend = FrontendConfig()
    a = cfg.augment
    policy = (SpecAugmentPolicy(a.num_freq_masks, a.freq_mask_width, a.num_time_masks,
                                a.time_mask_width) if a.enabled else None)
    batch_cfg = BatchConfig(cfg.data.num_speakers, cfg.data.crop_seconds,
                            noise_categories=tuple(cfg.data.noise_categories),
                            speed_factors=tuple(cfg.data.speed_factors))
    load = AudioCache()
    spe = cfg.optim.steps_per_epoch
    result = TrainResult(out_dir, out_dir / "last.pt", out_dir / "best.pt")
    loss_log = open(out_dir / "losses.jsonl", "a" if resume else "w")

    try:
        for epoch in range(start_epoch, cfg.optim.epochs):
            model.train()
            criterion.train()
            for i in range(spe):
                step = epoch * spe + i
                lr = learning_rate((step + 1) / spe, cfg.optim.lr_peak, cfg.optim.warmup_epochs,
                                   cfg.optim.epochs)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                rng = batch_seed(cfg.seed, step)
                batch = build_batch(train_recs, noise, batch_cfg, rng, load)
                tensors = featurize_batch(batch, speaker_index, frontend, policy, rng)
                outputs = model(tensors.inputs)
                try:
                    bundle = criterion(outputs, tensors.labels, tensors.clean_target,
                                       tensors.noise_target)
                except NonFiniteLossError as err:
                    diag = {"seed": cfg.seed, "step": step, "epoch": epoch,
                            "component": err.component, "utterances": batch.utterance_ids}
                    (out_dir / "abort.json").write_text(json.dumps(diag, indent=2))
                    raise TrainingAborted(f"non-finite loss at step {step}: {err}", diag) from err
                optimizer.zero_grad(set_to_none=True)
                bundle.total.backward()
                optimizer.step()

                rec = {"step": step, **bundle.as_floats(), "lr": lr}
                loss_log.write(json.dumps(rec) + "\n")
                result.totals.append(rec["total"])
                if step % 10 == 0:
                    log.info("step %d total %.4f lr %.5f", step, rec["total"], lr)
            loss_log.flush()

            extra = {"speakers": speakers, "best_eer": best_eer}
            every = cfg.validation.every_epochs
            is_last = epoch == cfg.optim.epochs - 1
            val_eer = None
            if every and ((epoch + 1) % every == 0 or is_last) and val_trials:
                val_eer = run_trials(model, val_trials, [Condition()], seed=cfg.seed).results[0].eer
                model.train()
                log.info("epoch %d validation EER %.2f%%", epoch, 100 * val_eer)
            state = dict(run_config=cfg.to_dict(), epoch=epoch, step=(epoch + 1) * spe,
                         loss_state=criterion.state_dict(),
                         optimizer_state=optimizer.state_dict())
            improved = val_eer is not None and val_eer < best_eer
            if improved:
                best_eer = val_eer
            extra["best_eer"] = best_eer
            save_checkpoint(out_dir / f"epoch{epoch:03d}.pt", model, extra=extra, **state)
            save_checkpoint(result.last_checkpoint, model, extra=extra, **state)
            if improved or (not every and is_last) or not result.best_checkpoint.exists():
                save_checkpoint(result.best_checkpoint, model, extra=extra, **state)
            result.history.append({"epoch": epoch, "val_eer": val_eer, "lr": lr})
    finally:
        loss_log.close()
    return result
