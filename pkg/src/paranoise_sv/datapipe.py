"""Manifests, SNR-controlled mixing, speed perturbation and paired clean/noisy batches."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from .features import (FrontendConfig, SpecAugmentPolicy, compute_log_mel, normalization_stats,
                       spec_augment)

SAMPLE_RATE = 16000
NOISE_CATEGORIES = ("babble", "music", "noise", "nonspeech")
TEST_SNRS = (0, 5, 10, 15, 20)
SPEED_FACTORS = (0.9, 1.0, 1.1)


class AudioFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def load_wav(path) -> np.ndarray:
    """Read a 16 kHz mono file as float32 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float32) / 2147483648.0
    if data.dtype.kind == "f":
        return data.astype(np.float32)
    raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")


def save_wav(path, samples, as_int16=True):
    samples = np.asarray(samples)
    if as_int16:
        data = (np.clip(samples, -1.0, 1.0) * 32767.0).round().astype(np.int16)
    else:
        data = samples.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, SAMPLE_RATE, data)


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker_id: str
    audio_path: str
    duration_s: float


def read_manifest(path, min_duration_s: float = 0.0) -> list[ManifestRecord]:
    """Parse ``utterance_id<TAB>speaker_id<TAB>path<TAB>duration`` lines.

    Relative audio paths are resolved against the manifest's directory.
    """
    root = Path(path).resolve().parent
    records, seen = [], set()
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields")
            utt, spk, audio, dur = row
            if utt in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utterance id {utt}")
            seen.add(utt)
            duration = float(dur)
            if duration <= min_duration_s:
                raise ManifestError(
                    f"{path}:{lineno}: {utt} lasts {duration}s, need more than {min_duration_s}s")
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = root / audio_path
            records.append(ManifestRecord(utt, spk, str(audio_path), duration))
    return records


def write_manifest(path, records, relative_to=None):
    relative_to = Path(relative_to or Path(path).parent).resolve()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for r in records:
            p = Path(r.audio_path)
            try:
                p = p.resolve().relative_to(relative_to)
            except ValueError:
                pass
            w.writerow([r.utterance_id, r.speaker_id, str(p), f"{r.duration_s:.4f}"])


@dataclass(frozen=True)
class Trial:
    label: int
    enroll: str
    test: str


def read_trials(path) -> list[Trial]:
    """VoxCeleb-style ``label enroll test`` lines; relative paths resolve against the file."""
    root = Path(path).resolve().parent
    trials, problems = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                problems.append(f"{path}:{lineno}: malformed trial {line.strip()!r}")
                continue
            resolve = lambda p: p if os.path.isabs(p) else str(root / p)
            trials.append(Trial(int(parts[0]), resolve(parts[1]), resolve(parts[2])))
    if problems:
        raise ManifestError("\n".join(problems))
    return trials


def write_trials(path, trials, relative_to=None):
    relative_to = Path(relative_to or Path(path).parent).resolve()

    def rel(p):
        try:
            return str(Path(p).resolve().relative_to(relative_to))
        except ValueError:
            return str(p)

    with open(path, "w") as f:
        for t in trials:
            f.write(f"{t.label} {rel(t.enroll)} {rel(t.test)}\n")


def signal_power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_at_snr(speech, noise, snr_db: float):
    """Scale ``noise`` to sit ``snr_db`` below ``speech`` and add it.

    Power is the mean square over the whole segment. Returns
    ``(mixed, scaled_noise)``; ``mixed - scaled_noise`` reproduces ``speech``.
    """
    speech = np.asarray(speech, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if speech.shape != noise.shape:
        raise ValueError(f"noise length {noise.shape} does not match speech {speech.shape}")
    p_s, p_n = signal_power(speech), signal_power(noise)
    if p_s <= 0:
        raise ValueError("speech has zero power")
    if p_n <= 0:
        raise ValueError("noise has zero power")
    gain = np.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    scaled = gain * noise
    return speech + scaled, scaled


def measured_snr(speech, scaled_noise) -> float:
    return 10.0 * np.log10(signal_power(speech) / signal_power(scaled_noise))


def fit_noise(noise, length: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Random-offset crop of a long noise, or wrap-around loop of a short one."""
    noise = np.asarray(noise)
    if len(noise) >= length:
        offset = int(rng.integers(0, len(noise) - length + 1))
        return noise[offset:offset + length], offset
    offset = int(rng.integers(0, len(noise)))
    reps = int(np.ceil((length + offset) / len(noise)))
    return np.tile(noise, reps)[offset:offset + length], offset


def speed_perturb(waveform, factor: float) -> np.ndarray:
    """Resample so playback runs ``factor`` times faster (tempo and pitch both shift)."""
    if factor not in SPEED_FACTORS:
        raise ValueError(f"unsupported speed factor {factor}; choose from {SPEED_FACTORS}")
    w = np.asarray(waveform)
    if factor == 1.0:
        return w.copy()
    target = int(round(len(w) / factor))
    frac = Fraction(factor).limit_denominator(100)
    out = resample_poly(w.astype(np.float64), frac.denominator, frac.numerator)
    if len(out) < target:
        out = np.pad(out, (0, target - len(out)))
    return out[:target].astype(w.dtype if w.dtype.kind == "f" else np.float64)


def crop(waveform, length: int, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(waveform)
    if len(w) >= length:
        start = int(rng.integers(0, len(w) - length + 1))
        return w[start:start + length]
    return fit_noise(w, length, rng)[0]


@dataclass(frozen=True)
class MixSpec:
    noise_category: str
    snr_db: float
    noise_utterance_id: str
    offset_samples: int


@dataclass
class BatchConfig:
    num_speakers: int = 8
    crop_seconds: float = 2.0
    snr_low: float = 0.0
    snr_high: float = 20.0
    noise_categories: tuple = ("babble", "music", "noise")
    speed_factors: tuple = SPEED_FACTORS

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * SAMPLE_RATE))


@dataclass
class TrainingBatch:
    clean: list  # (waveform, speaker_id)
    noisy: list  # (waveform, speaker_id, MixSpec)
    noise_only: list  # scaled noise aligned with noisy[i]
    utterance_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.clean)


class AudioCache:
    """Keeps decoded waveforms in memory; the desk-scale corpora fit comfortably."""

    def __init__(self):
        self._data = {}

    def __call__(self, path) -> np.ndarray:
        w = self._data.get(path)
        if w is None:
            w = load_wav(path)
            self._data[path] = w
        return w


def group_by(records, key):
    groups = {}
    for r in records:
        groups.setdefault(getattr(r, key), []).append(r)
    return groups


def build_batch(train_manifest, noise_manifest, cfg: BatchConfig, rng: np.random.Generator,
                load=None) -> TrainingBatch:
    """Sample distinct speakers and emit each clean crop with its noise-mixed twin.

    ``noise_manifest`` uses the speaker column for the noise category.
    """
    load = load or AudioCache()
    by_speaker = group_by(train_manifest, "speaker_id")
    speakers = sorted(by_speaker)
    if len(speakers) < cfg.num_speakers:
        raise ValueError(f"need {cfg.num_speakers} speakers, manifest has {len(speakers)}")
    by_category = group_by(noise_manifest, "speaker_id")
    categories = [c for c in cfg.noise_categories if c in by_category]
    if not categories:
        raise ValueError(f"noise manifest has none of the categories {cfg.noise_categories}")

    n = cfg.crop_samples
    chosen = rng.choice(len(speakers), size=cfg.num_speakers, replace=False)
    batch = TrainingBatch([], [], [])
    for idx in chosen:
        spk = speakers[idx]
        utts = by_speaker[spk]
        rec = utts[int(rng.integers(len(utts)))]
        wave = load(rec.audio_path)
        factor = cfg.speed_factors[int(rng.integers(len(cfg.speed_factors)))]
        wave = speed_perturb(wave, factor)
        clean = crop(wave, n, rng).astype(np.float64)
        if signal_power(clean) == 0:
            raise ValueError(f"{rec.utterance_id}: silent crop")

        category = categories[int(rng.integers(len(categories)))]
        noise_rec = by_category[category][int(rng.integers(len(by_category[category])))]
        noise, offset = fit_noise(load(noise_rec.audio_path), n, rng)
        snr = float(rng.uniform(cfg.snr_low, cfg.snr_high))
        mixed, scaled = mix_at_snr(clean, noise, snr)
        # (s + n) - n can differ from s in the last ulp; keep the pair exactly additive
        clean = mixed - scaled

        spec = MixSpec(category, snr, noise_rec.utterance_id, offset)
        batch.clean.append((clean, spk))
        batch.noisy.append((mixed, spk, spec))
        batch.noise_only.append(scaled)
        batch.utterance_ids.append(rec.utterance_id)
    return batch


def batch_seed(seed: int, index: int) -> np.random.Generator:
    """Independent generator per batch index, so worker layout never changes batches."""
    return np.random.default_rng([seed, index])


@dataclass
class BatchTensors:
    inputs: torch.Tensor  # [2B, 1, 64, T]: clean half then noisy half
    labels: torch.Tensor  # [2B]
    clean_target: torch.Tensor  # [B, 1, 64, T]
    noise_target: torch.Tensor  # [B, 1, 64, T]


def featurize_batch(batch: TrainingBatch, speaker_index: dict, frontend: FrontendConfig,
                    augment: SpecAugmentPolicy | None, rng: np.random.Generator) -> BatchTensors:
    """Log-Mel features for a batch.

    Each input is normalized with its own statistics. The clean-speech and
    noise targets of the noisy half reuse the noisy input's statistics so they
    live on the same scale as the network input. SpecAugment touches the noisy
    inputs only.
    """
    clean = compute_log_mel(np.stack([w for w, _ in batch.clean]), frontend)
    noisy = compute_log_mel(np.stack([w for w, _, _ in batch.noisy]), frontend)
    noise = compute_log_mel(np.stack(batch.noise_only), frontend)

    c_mean, c_std = normalization_stats(clean)
    n_mean, n_std = normalization_stats(noisy)
    clean_in = (clean - c_mean) / c_std
    noisy_in = (noisy - n_mean) / n_std
    if augment is not None:
        noisy_in = torch.stack([spec_augment(s, augment, rng) for s in noisy_in])
    labels = torch.tensor([speaker_index[s] for _, s in batch.clean], dtype=torch.long)
    return BatchTensors(
        inputs=torch.cat([clean_in, noisy_in]).unsqueeze(1),
        labels=torch.cat([labels, labels]),
        clean_target=((clean - n_mean) / n_std).unsqueeze(1),
        noise_target=((noise - n_mean) / n_std).unsqueeze(1),
    )
