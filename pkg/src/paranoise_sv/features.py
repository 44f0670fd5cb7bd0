"""Log-Mel frontend, per-utterance normalization and SpecAugment masking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


class TooShortError(ValueError):
    """Waveform is shorter than a single analysis window."""


class DegenerateInputError(ValueError):
    """Spectrogram has too few frames for normalization statistics."""


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 64
    window_ms: float = 25.0
    hop_ms: float = 10.0
    sample_rate_hz: int = 16000
    fft_size: int = 512
    log_floor: float = 1e-6
    f_min: float = 20.0

    def __post_init__(self):
        if self.n_mels != 64:
            raise ValueError(f"n_mels must be 64, got {self.n_mels}")
        if self.window_ms <= self.hop_ms:
            raise ValueError("window must be longer than hop")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.fft_size < self.win_length:
            raise ValueError("fft_size must cover the analysis window")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000))

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_length:
            raise TooShortError(
                f"waveform has {num_samples} samples, need at least {self.win_length}"
            )
        return (num_samples - self.win_length) // self.hop_length + 1


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular HTK-style filterbank of shape [n_mels, fft_size // 2 + 1]."""
    n_freqs = cfg.fft_size // 2 + 1
    fft_freqs = np.linspace(0.0, cfg.sample_rate_hz / 2, n_freqs)
    mel_pts = np.linspace(
        _hz_to_mel(cfg.f_min), _hz_to_mel(cfg.sample_rate_hz / 2), cfg.n_mels + 2
    )
    hz_pts = _mel_to_hz(mel_pts)
    lower, center, upper = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    return np.clip(np.minimum(up, down), 0.0, None)


_FBANK_CACHE: dict = {}


def _fbank_tensor(cfg: FrontendConfig) -> torch.Tensor:
    fb = _FBANK_CACHE.get(cfg)
    if fb is None:
        fb = torch.from_numpy(mel_filterbank(cfg)).float()
        _FBANK_CACHE[cfg] = fb
    return fb


def compute_log_mel(waveform, cfg: FrontendConfig | None = None) -> torch.Tensor:
    """Log-Mel spectrogram of a 16 kHz waveform.

    Accepts a 1-D waveform ``[N]`` or a batch ``[B, N]`` (numpy or torch) and
    returns ``[64, T]`` or ``[B, 64, T]`` with ``T = (N - 400) // 160 + 1``.
    Frames are not centered, so no samples are invented at the edges.
    """
    cfg = cfg or FrontendConfig()
    x = torch.as_tensor(np.asarray(waveform) if not torch.is_tensor(waveform) else waveform)
    x = x.float()
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    if not torch.isfinite(x).all():
        raise ValueError("waveform contains non-finite samples")
    cfg.num_frames(x.shape[-1])  # raises TooShortError

    frames = x.unfold(-1, cfg.win_length, cfg.hop_length)  # [B, T, win]
    window = torch.hann_window(cfg.win_length, periodic=False, dtype=x.dtype)
    spec = torch.fft.rfft(frames * window, n=cfg.fft_size, dim=-1)
    power = spec.real.square() + spec.imag.square()  # [B, T, F]
    mel = torch.matmul(power, _fbank_tensor(cfg).T)  # [B, T, n_mels]
    logmel = torch.log(mel + cfg.log_floor).transpose(1, 2).contiguous()
    return logmel[0] if squeeze else logmel


def instance_normalize(spec: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Zero-mean, unit-variance normalization over the whole F x T plane.

    Works on ``[F, T]`` or any leading batch shape ``[..., F, T]``; statistics are
    taken per utterance.
    """
    if spec.shape[-1] < 2:
        raise DegenerateInputError(f"need at least 2 frames, got {spec.shape[-1]}")
    x = spec.double()
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return ((x - mean) / torch.sqrt(var + eps)).to(spec.dtype)


def normalization_stats(spec: torch.Tensor, eps: float = 1e-10):
    """Per-utterance (mean, std) used by :func:`instance_normalize`."""
    x = spec.double()
    mean = x.mean(dim=(-2, -1), keepdim=True)
    std = torch.sqrt(x.var(dim=(-2, -1), unbiased=False, keepdim=True) + eps)
    return mean.to(spec.dtype), std.to(spec.dtype)


@dataclass(frozen=True)
class Mask:
    axis: str  # "freq" or "time"
    start: int
    width: int


@dataclass(frozen=True)
class SpecAugmentPolicy:
    num_freq_masks: int = 1
    freq_mask_width: int = 8
    num_time_masks: int = 1
    time_mask_width: int = 10
    n_mels: int = 64
    fill: str = "zero"

    def __post_init__(self):
        if self.freq_mask_width >= self.n_mels:
            raise ValueError(
                f"freq mask width {self.freq_mask_width} must be below n_mels {self.n_mels}"
            )
        if min(self.num_freq_masks, self.num_time_masks,
               self.freq_mask_width, self.time_mask_width) < 0:
            raise ValueError("mask counts and widths must be non-negative")
        if self.fill not in ("zero", "mean"):
            raise ValueError(f"unknown fill {self.fill!r}")

    def sample_masks(self, num_frames: int, rng: np.random.Generator) -> list[Mask]:
        if self.num_time_masks and self.time_mask_width >= num_frames:
            raise ValueError(
                f"time mask width {self.time_mask_width} must be below T={num_frames}"
            )
        masks = []
        for _ in range(self.num_freq_masks):
            w = int(rng.integers(0, self.freq_mask_width + 1))
            masks.append(Mask("freq", int(rng.integers(0, self.n_mels - w + 1)), w))
        for _ in range(self.num_time_masks):
            w = int(rng.integers(0, self.time_mask_width + 1))
            masks.append(Mask("time", int(rng.integers(0, num_frames - w + 1)), w))
        return masks


def apply_masks(spec: torch.Tensor, masks: list[Mask], fill: str = "zero") -> torch.Tensor:
    out = spec.clone()
    value = spec.mean() if fill == "mean" else 0.0
    for m in masks:
        if m.width == 0:
            continue
        if m.axis == "freq":
            out[..., m.start:m.start + m.width, :] = value
        else:
            out[..., m.start:m.start + m.width] = value
    return out


def spec_augment(spec: torch.Tensor, policy: SpecAugmentPolicy,
                 rng: np.random.Generator, return_masks: bool = False):
    """Mask random frequency bands and time spans of a ``[64, T]`` spectrogram."""
    masks = policy.sample_masks(spec.shape[-1], rng)
    out = apply_masks(spec, masks, policy.fill)
    return (out, masks) if return_masks else out


def pad_frames(spec: torch.Tensor, multiple: int) -> tuple[torch.Tensor, int]:
    """Right-pad the time axis to a multiple with the per-utterance minimum."""
    t = spec.shape[-1]
    target = int(math.ceil(t / multiple) * multiple)
    if target == t:
        return spec, t
    floor = spec.amin(dim=(-2, -1), keepdim=True)
    pad = floor.expand(*spec.shape[:-1], target - t)
    return torch.cat([spec, pad], dim=-1), t
