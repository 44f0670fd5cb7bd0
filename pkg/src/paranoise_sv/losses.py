"""Reconstruction, classification and metric-learning objectives and their joint sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"loss component {component} is not finite: {value}")
        self.component = component


def _check_labels(labels, num_classes):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")


def mse_spec(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).square().mean()


def cross_entropy_initial(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_labels(labels, logits.shape[-1])
    return F.cross_entropy(logits, labels)


def angular_prototypical(noisy: torch.Tensor, clean: torch.Tensor, w, b,
                         min_scale: float = 1e-3) -> torch.Tensor:
    """Each noisy embedding must pick its own speaker's clean embedding.

    ``noisy[i]`` and ``clean[i]`` belong to speaker i; the logits are
    ``w * cos(noisy_i, clean_j) + b``.
    """
    if noisy.shape != clean.shape:
        raise ValueError("noisy and clean embeddings must pair up")
    n = noisy.shape[0]
    if n < 2:
        raise ValueError(f"angular prototypical loss needs at least 2 speakers, got {n}")
    w = torch.as_tensor(w, dtype=noisy.dtype)
    b = torch.as_tensor(b, dtype=noisy.dtype)
    cos = F.normalize(noisy, dim=1) @ F.normalize(clean, dim=1).T
    logits = torch.clamp(w, min=min_scale) * cos + b
    return F.cross_entropy(logits, torch.arange(n, device=noisy.device))


def aam_logits(embeddings, prototypes, labels, margin=0.15, scale=32.0):
    """Scaled cosine logits with ``cos(theta + m)`` on the target class.

    Past ``theta = pi - m`` the target logit falls back to ``cos(theta) - m sin(m)``
    so it keeps decreasing in theta.
    """
    cos = F.normalize(embeddings, dim=1) @ F.normalize(prototypes, dim=1).T
    cos_m, sin_m = math.cos(margin), math.sin(margin)
    threshold = math.cos(math.pi - margin)
    fallback = math.sin(math.pi - margin) * margin
    sin = torch.sqrt((1.0 - cos * cos).clamp(0, 1))
    phi = cos * cos_m - sin * sin_m
    phi = torch.where(cos > threshold, phi, cos - fallback)
    one_hot = F.one_hot(labels, prototypes.shape[0]).to(cos.dtype)
    return scale * (one_hot * phi + (1.0 - one_hot) * cos)


def aam_softmax(embeddings, labels, prototypes, margin=0.15, scale=32.0):
    _check_labels(labels, prototypes.shape[0])
    if not 0 <= margin < math.pi / 2:
        raise ValueError(f"margin must lie in [0, pi/2), got {margin}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    return F.cross_entropy(aam_logits(embeddings, prototypes, labels, margin, scale), labels)


@dataclass
class LossBundle:
    l_n: torch.Tensor
    l_s: torch.Tensor
    l_c: torch.Tensor
    l_ap: torch.Tensor
    l_aam: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        names = ("l_n", "l_s", "l_c", "l_ap", "l_aam", "total")
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in names}


def total_loss(l_n, l_s, l_c, l_ap, l_aam) -> LossBundle:
    """Unweighted sum. ``l_n=None`` (no NE network) is recorded as an exact zero."""
    if l_n is None:
        l_n = torch.zeros((), dtype=torch.as_tensor(l_s).dtype)
    parts = {"l_n": l_n, "l_s": l_s, "l_c": l_c, "l_ap": l_ap, "l_aam": l_aam}
    parts = {k: torch.as_tensor(v) for k, v in parts.items()}
    for k, v in parts.items():
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(k, float(v.detach()))
    total = parts["l_n"] + parts["l_s"] + parts["l_c"] + parts["l_ap"] + parts["l_aam"]
    return LossBundle(total=total, **parts)


@dataclass
class AAMConfig:
    margin: float = 0.15
    scale: float = 32.0
    num_classes: int = 1211

    def __post_init__(self):
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


class JointLoss(nn.Module):
    """Owns the trainable loss heads and evaluates the five-term objective.

    The batch is laid out as ``[clean_0..clean_{B-1}, noisy_0..noisy_{B-1}]``
    with ``noisy_i`` the noise-mixed twin of ``clean_i``. Reconstruction terms
    use the noisy half only, since the clean half has no noise to extract.
    """

    def __init__(self, embedding_dim: int, aam: AAMConfig, ap_init_w=10.0, ap_init_b=-5.0):
        super().__init__()
        self.aam = aam
        self.classifier = nn.Linear(embedding_dim, aam.num_classes)
        self.prototypes = nn.Parameter(torch.empty(aam.num_classes, embedding_dim))
        nn.init.xavier_normal_(self.prototypes, gain=1)
        self.ap_w = nn.Parameter(torch.tensor(float(ap_init_w)))
        self.ap_b = nn.Parameter(torch.tensor(float(ap_init_b)))

    def forward(self, outputs, labels, clean_target, noise_target=None) -> LossBundle:
        """``clean_target``/``noise_target``: ``[B, 1, 64, T]`` targets for the noisy half."""
        emb = outputs.embedding
        b = labels.shape[0] // 2
        if labels.shape[0] != 2 * b or not torch.equal(labels[:b], labels[b:]):
            raise ValueError("batch must be clean/noisy pairs with matching labels")

        l_s = mse_spec(outputs.speech.estimate[b:], clean_target)
        l_n = None
        if outputs.noise is not None:
            if noise_target is None:
                raise ValueError("noise target required when the NE network is present")
            l_n = mse_spec(outputs.noise.estimate[b:], noise_target)
        l_c = cross_entropy_initial(self.classifier(emb.initial), labels)
        l_ap = angular_prototypical(emb.final[b:], emb.final[:b], self.ap_w, self.ap_b)
        l_aam = aam_softmax(emb.final, labels, self.prototypes, self.aam.margin, self.aam.scale)
        return total_loss(l_n, l_s, l_c, l_ap, l_aam)
