"""Synthetic stand-in corpus: harmonic "speakers" and parametric noise categories.

Each speaker has a fixed pitch range, formant set and spectral tilt. Utterances
are strings of voiced syllables whose pitch contour and formants jitter
around the speaker's signature. The noise corpus covers babble (crowds of
non-training speakers), music (chords with plucked decays), stationary
coloured noise and impulsive non-speech events. Output uses the same manifest
and trial formats as a real corpus.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import (SAMPLE_RATE, ManifestRecord, Trial, save_wav, write_manifest,
                       write_trials)


@dataclass(frozen=True)
class SpeakerProfile:
    f0: float
    formants: tuple
    bandwidths: tuple
    tilt_db_per_khz: float
    breath: float


def random_speaker(rng: np.random.Generator) -> SpeakerProfile:
    f0 = float(rng.uniform(85, 260))
    f1 = rng.uniform(300, 900)
    f2 = rng.uniform(max(f1 + 300, 900), 2500)
    f3 = rng.uniform(max(f2 + 300, 2300), 3600)
    f4 = rng.uniform(3600, 5000)
    return SpeakerProfile(
        f0=f0,
        formants=(float(f1), float(f2), float(f3), float(f4)),
        bandwidths=tuple(float(b) for b in rng.uniform(60, 250, size=4)),
        tilt_db_per_khz=float(rng.uniform(-9, -3)),
        breath=float(rng.uniform(0.005, 0.05)),
    )


def _envelope_gain(freqs, profile: SpeakerProfile, formant_shift=1.0):
    gain = np.zeros_like(freqs)
    for f, bw in zip(profile.formants, profile.bandwidths):
        gain += np.exp(-0.5 * ((freqs - f * formant_shift) / bw) ** 2)
    tilt = 10 ** (profile.tilt_db_per_khz * freqs / 1000 / 20)
    return (0.05 + gain) * tilt


def synth_utterance(profile: SpeakerProfile, duration_s: float,
                    rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s * SAMPLE_RATE))
    out = np.zeros(n)
    pos = int(rng.integers(0, 800))
    while pos < n:
        seg = int(rng.uniform(0.12, 0.32) * SAMPLE_RATE)
        seg = min(seg, n - pos)
        if seg < 200:
            break
        t = np.arange(seg) / SAMPLE_RATE
        f0 = profile.f0 * rng.uniform(0.9, 1.1)
        contour = f0 * (1 + rng.uniform(-0.08, 0.08) * t / t[-1]
                        + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 7) * t))
        phase = 2 * np.pi * np.cumsum(contour) / SAMPLE_RATE
        shift = rng.uniform(0.92, 1.08)
        k = np.arange(1, int(7600 // (f0 * 1.1)) + 1)
        amps = _envelope_gain(k * f0, profile, shift)
        voiced = (amps[:, None] * np.sin(k[:, None] * phase[None, :]
                                          + rng.uniform(0, 2 * np.pi, size=(len(k), 1)))).sum(0)
        voiced += profile.breath * rng.standard_normal(seg) * np.abs(voiced).max()
        env = np.sin(np.pi * np.arange(seg) / seg) ** 0.6 * rng.uniform(0.5, 1.0)
        out[pos:pos + seg] += voiced * env
        pos += seg + int(rng.uniform(0.02, 0.12) * SAMPLE_RATE)
    out += 1e-3 * rng.standard_normal(n) * np.abs(out).max()
    return _peak_normalize(out, rng.uniform(0.5, 0.9))


def _peak_normalize(x, peak=0.9):
    m = np.abs(x).max()
    return x if m == 0 else x * (peak / m)


def synth_babble(duration_s, rng, talkers=None):
    talkers = talkers or int(rng.integers(3, 7))
    mix = sum(synth_utterance(random_speaker(rng), duration_s, rng) for _ in range(talkers))
    return _peak_normalize(mix, 0.8)


def synth_music(duration_s, rng):
    n = int(round(duration_s * SAMPLE_RATE))
    out = np.zeros(n)
    note_len = int(rng.uniform(0.15, 0.5) * SAMPLE_RATE)
    for start in range(0, n, note_len):
        seg = min(note_len, n - start)
        t = np.arange(seg) / SAMPLE_RATE
        root = 110 * 2 ** (rng.integers(0, 24) / 12)
        chord = root * 2 ** (np.array([0, 4, 7, rng.choice([10, 11, 12])]) / 12)
        decay = np.exp(-t * rng.uniform(2, 8))
        for f in chord:
            for h in range(1, 6):
                if f * h < 7800:
                    out[start:start + seg] += decay * np.sin(2 * np.pi * f * h * t) / h ** 1.5
    return _peak_normalize(out, 0.8)


def synth_stationary_noise(duration_s, rng):
    n = int(round(duration_s * SAMPLE_RATE))
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    slope = rng.uniform(-1.0, 0.5)  # brown-ish .. bluish
    spec *= np.where(freqs > 0, (np.maximum(freqs, 20) / 1000) ** (slope / 2), 0)
    out = np.fft.irfft(spec, n)
    if rng.random() < 0.5:
        hum = rng.choice([50.0, 60.0])
        t = np.arange(n) / SAMPLE_RATE
        out += 0.5 * out.std() * sum(np.sin(2 * np.pi * hum * h * t) / h for h in range(1, 4))
    return _peak_normalize(out, 0.8)


def synth_nonspeech(duration_s, rng):
    n = int(round(duration_s * SAMPLE_RATE))
    out = 0.02 * rng.standard_normal(n)
    for _ in range(int(rng.integers(4, 12))):
        start = int(rng.integers(0, n - 1))
        length = int(min(n - start, rng.uniform(0.02, 0.4) * SAMPLE_RATE))
        t = np.arange(length) / SAMPLE_RATE
        kind = rng.integers(3)
        if kind == 0:  # knock
            ev = np.exp(-t * 60) * np.sin(2 * np.pi * rng.uniform(80, 400) * t)
        elif kind == 1:  # chirp
            f = rng.uniform(500, 3000) + rng.uniform(-2000, 4000) * t
            ev = np.sin(2 * np.pi * np.cumsum(f) / SAMPLE_RATE) * np.hanning(length)
        else:  # rustle
            ev = rng.standard_normal(length) * np.exp(-t * rng.uniform(5, 30))
        out[start:start + length] += ev * rng.uniform(0.3, 1.0)
    return _peak_normalize(out, 0.8)


NOISE_SYNTHS = {
    "babble": synth_babble,
    "music": synth_music,
    "noise": synth_stationary_noise,
    "nonspeech": synth_nonspeech,
}


@dataclass(frozen=True)
class CorpusLayout:
    root: Path

    @property
    def train_manifest(self):
        return self.root / "train.tsv"

    @property
    def noise_manifest(self):
        return self.root / "noise.tsv"

    @property
    def trials(self):
        return self.root / "trials.txt"


def generate_corpus(root, num_speakers=8, utts_per_speaker=10, duration_s=3.0,
                    noise_per_category=4, noise_duration_s=5.0, seed=0) -> CorpusLayout:
    """Write audio, manifests and an all-pairs clean trial list under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    records = []
    for s in range(num_speakers):
        profile = random_speaker(rng)
        spk = f"spk{s:03d}"
        for u in range(utts_per_speaker):
            dur = duration_s * rng.uniform(0.9, 1.1)
            path = root / "speech" / spk / f"{spk}_{u:03d}.wav"
            save_wav(path, synth_utterance(profile, dur, rng))
            records.append(ManifestRecord(f"{spk}_{u:03d}", spk, str(path), dur))
    write_manifest(root / "train.tsv", records)

    noise_records = []
    for cat, fn in NOISE_SYNTHS.items():
        for i in range(noise_per_category):
            path = root / "noise" / cat / f"{cat}_{i:03d}.wav"
            save_wav(path, fn(noise_duration_s, rng))
            noise_records.append(ManifestRecord(f"{cat}_{i:03d}", cat, str(path),
                                                noise_duration_s))
    write_manifest(root / "noise.tsv", noise_records)

    trials = [Trial(int(a.speaker_id == b.speaker_id), a.audio_path, b.audio_path)
              for a, b in itertools.combinations(records, 2)]
    write_trials(root / "trials.txt", trials)
    return CorpusLayout(root)
