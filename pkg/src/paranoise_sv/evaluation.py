"""Trial scoring, equal error rate and per-condition reports."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datapipe import (NOISE_CATEGORIES, TEST_SNRS, AudioCache, ManifestError, Trial,
                       fit_noise, group_by, mix_at_snr)
from .features import FrontendConfig, compute_log_mel, instance_normalize


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cannot score a zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    condition: str = "clean"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(int)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must have equal length")


def det_points(scores, labels):
    """FAR and FRR at ``-inf``, every midpoint between distinct scores, and ``+inf``.

    A trial is accepted when its score is at or above the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    tar = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    uniq = np.unique(scores)
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    frr = np.searchsorted(tar, thresholds, side="left") / len(tar)
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    return thresholds, far, frr


def compute_eer(scores, labels=None):
    """Equal error rate and its threshold.

    Takes a :class:`ScoreSet` or ``(scores, labels)``. FAR and FRR are swept
    over the thresholds of :func:`det_points`; the EER interpolates linearly
    between the last point with FAR >= FRR and the next one.
    """
    if isinstance(scores, ScoreSet):
        scores, labels = scores.scores, scores.labels
    labels = np.asarray(labels).astype(int)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise ValueError("EER needs both target and non-target trials")
    thresholds, far, frr = det_points(scores, labels)
    diff = far - frr  # non-increasing
    k = int(np.nonzero(diff >= 0)[0][-1])
    lo, hi = float(np.min(scores)), float(np.max(scores))
    finite = np.clip(thresholds, lo, hi)
    if diff[k] == 0:
        return float(far[k]), float(finite[k])
    alpha = diff[k] / (diff[k] - diff[k + 1])
    eer = far[k] + alpha * (far[k + 1] - far[k])
    thr = finite[k] + alpha * (finite[k + 1] - finite[k])
    return float(eer), float(thr)


@dataclass(frozen=True)
class Condition:
    category: str | None = None
    snr_db: float | None = None

    @property
    def name(self) -> str:
        return "clean" if self.category is None else f"{self.category}@{self.snr_db:g}"

    @classmethod
    def parse(cls, text: str) -> "Condition":
        if text == "clean":
            return cls()
        cat, _, snr = text.partition("@")
        if cat not in NOISE_CATEGORIES or not snr:
            raise ValueError(f"bad condition {text!r}; use 'clean' or '<category>@<snr>'")
        return cls(cat, float(snr))


def expand_conditions(names, snrs=TEST_SNRS) -> list[Condition]:
    """``["clean", "babble"]`` -> clean plus babble at every SNR in ``snrs``."""
    out = []
    for name in names:
        name = name.strip()
        if not name:
            continue
        if name == "clean" or "@" in name:
            out.append(Condition.parse(name))
        elif name in NOISE_CATEGORIES:
            out.extend(Condition(name, float(s)) for s in snrs)
        else:
            raise ValueError(f"unknown condition {name!r}")
    return out


TABLE_CONDITIONS = [Condition()] + [Condition(c, float(s)) for c in ("babble", "music", "noise")
                                    for s in TEST_SNRS]


@dataclass
class ConditionResult:
    condition: Condition
    eer: float
    threshold: float
    num_trials: int


@dataclass
class ConditionReport:
    results: list = field(default_factory=list)
    label: str = ""

    @property
    def average(self) -> float:
        return float(np.mean([r.eer for r in self.results]))

    def eer_percent(self, condition_name) -> float:
        for r in self.results:
            if r.condition.name == condition_name:
                return 100.0 * r.eer
        raise KeyError(condition_name)

    def records(self) -> list[dict]:
        rows = [{"condition": r.condition.category or "clean", "snr_db": r.condition.snr_db,
                 "eer_percent": round(100.0 * r.eer, 6), "num_trials": r.num_trials}
                for r in self.results]
        rows.append({"condition": "average", "snr_db": None,
                     "eer_percent": round(100.0 * self.average, 6),
                     "num_trials": sum(r.num_trials for r in self.results)})
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def to_table(self) -> str:
        head = f"EER (%) {self.label}".rstrip()
        lines = [head, "Avg. is the mean over every condition listed, clean included."]
        lines.append(f"{'condition':<16}{'EER %':>10}{'trials':>10}")
        for r in self.results:
            lines.append(f"{r.condition.name:<16}{100 * r.eer:>10.2f}{r.num_trials:>10d}")
        lines.append(f"{'Avg.':<16}{100 * self.average:>10.2f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="report", plot=False):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.txt").write_text(self.to_table())
        (out_dir / f"{stem}.jsonl").write_text(self.to_jsonl())
        if plot:
            self.plot(out_dir / f"{stem}.png")

    def plot(self, path):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for cat in NOISE_CATEGORIES:
            pts = sorted((r.condition.snr_db, 100 * r.eer) for r in self.results
                         if r.condition.category == cat)
            if pts:
                ax.plot(*zip(*pts), marker="o", label=cat)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("EER (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def _condition_rng(seed, condition: Condition, path: str) -> np.random.Generator:
    key = zlib.crc32(f"{condition.name}|{Path(path).name}".encode())
    return np.random.default_rng([seed, key])


class Embedder:
    """Whole-utterance embedding extraction with an optional additive noise condition."""

    def __init__(self, model, frontend: FrontendConfig | None = None, noise_records=(),
                 seed: int = 0, load=None):
        self.model = model
        self.frontend = frontend or FrontendConfig()
        self.noise = group_by(list(noise_records), "speaker_id")
        self.seed = seed
        self.load = load or AudioCache()

    def waveform(self, path, condition: Condition) -> np.ndarray:
        w = self.load(path).astype(np.float64)
        if condition.category is None:
            return w
        pool = self.noise.get(condition.category)
        if not pool:
            raise ManifestError(f"no noise recordings for category {condition.category!r}")
        rng = _condition_rng(self.seed, condition, path)
        rec = pool[int(rng.integers(len(pool)))]
        noise, _ = fit_noise(self.load(rec.audio_path), len(w), rng)
        return mix_at_snr(w, noise, condition.snr_db)[0]

    @torch.no_grad()
    def __call__(self, path, condition: Condition = Condition()) -> np.ndarray:
        spec = instance_normalize(compute_log_mel(self.waveform(path, condition), self.frontend))
        self.model.eval()
        emb = self.model(spec[None, None]).embedding.final[0]
        return emb.double().numpy()


def run_trials(model, trials: list[Trial], conditions, noise_records=(),
               frontend: FrontendConfig | None = None, seed: int = 0,
               label: str = "") -> ConditionReport:
    """Score every trial under every condition; noise goes on the test side only."""
    missing = sorted({p for t in trials for p in (t.enroll, t.test) if not Path(p).is_file()})
    if missing:
        raise FileNotFoundError("missing audio:\n" + "\n".join(missing))
    if not trials:
        raise ManifestError("empty trial list")
    conditions = list(conditions)
    needed = {c.category for c in conditions if c.category is not None}
    have = {r.speaker_id for r in noise_records}
    if needed - have:
        raise ManifestError(f"no noise recordings for {sorted(needed - have)}")

    embed = Embedder(model, frontend, noise_records, seed)
    enroll = {p: embed(p) for p in sorted({t.enroll for t in trials})}
    labels = np.array([t.label for t in trials])
    report = ConditionReport(label=label)
    for cond in conditions:
        tests = {p: (enroll[p] if cond.category is None and p in enroll else embed(p, cond))
                 for p in sorted({t.test for t in trials})}
        scores = np.array([cosine_score(enroll[t.enroll], tests[t.test]) for t in trials])
        eer, thr = compute_eer(scores, labels)
        report.results.append(ConditionResult(cond, eer, thr, len(trials)))
    return report
