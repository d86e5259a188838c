"""Training objectives: contrastive, semantic brightness consistency,
feature retention and colour constancy / illumination smoothness.

All functions take single images ``(3, H, W)`` and return scalar tensors that
stay on the autograd graph of ``I_H`` (and of the curve maps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import torch

from .features import FeatureBackend, expectation, gram_distance, gram_set
from .imageio import brightness_map
from .segmenter import IGNORE_INDEX, as_label_tensor

__all__ = [
    "Margins",
    "LossWeights",
    "LossConfig",
    "LossReport",
    "contrastive_loss",
    "category_brightness_mean",
    "semantic_consistency_terms",
    "semantic_consistency_loss",
    "feature_retention_loss",
    "color_constancy_loss",
    "total_loss",
    "TERMS",
]

TERMS = ("l_c", "l_sc", "l_fr", "l_cc")
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class Margins:
    alpha: float = 0.3
    beta: float = 0.04

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"margins must be non-negative, got alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True)
class LossWeights:
    c: float = 1.0
    sc: float = 1.0
    fr: float = 1.0
    cc: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"loss weight w_{k} must be finite and >= 0, got {v}")

    def for_term(self, term: str) -> float:
        return getattr(self, term[2:])


@dataclass(frozen=True)
class LossConfig:
    margins: Margins = field(default_factory=Margins)
    weights: LossWeights = field(default_factory=LossWeights)
    lam: float = 200.0
    brightness_mode: str = "mean"
    contrast_layers: tuple[str, ...] | None = None  # None: every backend tap
    retention_layer: str | None = None  # None: backend default
    ignore_index: int = IGNORE_INDEX


@dataclass
class LossReport:
    l_c: torch.Tensor
    l_sc: torch.Tensor
    l_fr: torch.Tensor
    l_cc: torch.Tensor
    total: torch.Tensor
    weights: LossWeights
    margins: Margins

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in (*TERMS, "total")}


def contrastive_loss(I_H: torch.Tensor, I_P: torch.Tensor, I_N: torch.Tensor | None,
                     backend: FeatureBackend, margins: Margins = Margins(),
                     layers: Sequence[str] | None = None) -> torch.Tensor:
    """Triplet hinge on Gram-set distances plus a hinge on mean intensity.

    ``I_N=None`` drops the negative distances (the no-negatives setting).
    """
    g_h = gram_set(backend.extract(I_H, layers))
    with torch.no_grad():
        g_p = gram_set(backend.extract(I_P.to(I_H.dtype), layers))
    e_h, e_p = expectation(I_H), expectation(I_P.to(I_H.dtype))
    d_gram = gram_distance(g_h, g_p)
    d_mean = (e_h - e_p).abs()
    if I_N is not None:
        with torch.no_grad():
            g_n = gram_set(backend.extract(I_N.to(I_H.dtype), layers))
        d_gram = d_gram - gram_distance(g_h, g_n)
        d_mean = d_mean - (e_h - expectation(I_N.to(I_H.dtype))).abs()
    return torch.clamp(d_gram + margins.alpha, min=0) + torch.clamp(d_mean + margins.beta, min=0)


def category_brightness_mean(I_H: torch.Tensor, labels, s: int, mode: str = "mean") -> torch.Tensor:
    lab = as_label_tensor(labels)
    sel = lab == s
    n = int(sel.sum())
    if n == 0:
        raise ValueError(f"category {s} has no pixels")
    return brightness_map(I_H, mode)[sel].sum() / n


def semantic_consistency_terms(I_H: torch.Tensor, labels, probs: torch.Tensor, mode: str = "mean",
                               ignore_index: int = IGNORE_INDEX) -> tuple[torch.Tensor, torch.Tensor]:
    """(within-category brightness sum of squares, per-pixel cross-entropy)."""
    lab = as_label_tensor(labels)
    if lab.shape != I_H.shape[1:] or probs.shape[1:] != I_H.shape[1:]:
        raise ValueError(f"shape mismatch: image {tuple(I_H.shape)}, labels {tuple(lab.shape)}, probs {tuple(probs.shape)}")
    num_classes = probs.shape[0]
    b = brightness_map(I_H, mode)
    variance = b.new_zeros(())
    for s in lab.unique().tolist():
        if s == ignore_index:
            continue
        if not 0 <= s < num_classes:
            raise ValueError(f"label {s} outside [0, {num_classes})")
        vals = b[lab == s]
        variance = variance + ((vals - vals.mean()) ** 2).sum()
    valid = lab != ignore_index
    if valid.any():
        idx = torch.where(valid, lab, torch.zeros_like(lab))
        q = probs.gather(0, idx[None])[0]
        ce = -(torch.log(q.clamp_min(LOG_CLAMP))[valid]).mean()
    else:
        ce = b.new_zeros(())
    return variance, ce


def semantic_consistency_loss(I_H, labels, probs, mode: str = "mean", ignore_index: int = IGNORE_INDEX):
    variance, ce = semantic_consistency_terms(I_H, labels, probs, mode, ignore_index)
    return variance + ce


def feature_retention_loss(I_L: torch.Tensor, I_H: torch.Tensor, backend: FeatureBackend,
                           layer: str | None = None) -> torch.Tensor:
    if I_L.shape != I_H.shape:
        raise ValueError(f"I_L {tuple(I_L.shape)} and I_H {tuple(I_H.shape)} differ in size")
    layer = layer or backend.default_retention_layer
    f_h = backend.extract(I_H, [layer])[layer]
    with torch.no_grad():
        f_l = backend.extract(I_L.to(I_H.dtype), [layer])[layer]
    return ((f_l - f_h) ** 2).mean()


def color_constancy_loss(I_H: torch.Tensor, curves: torch.Tensor, lam: float = 200.0) -> torch.Tensor:
    """Gray-world channel-mean penalty plus lambda-weighted curve smoothness."""
    if curves.ndim != 4 or curves.shape[1:] != I_H.shape:
        raise ValueError(f"curves {tuple(curves.shape)} do not match image {tuple(I_H.shape)}")
    j = I_H.mean(dim=(1, 2))
    gray = (j[0] - j[1]) ** 2 + (j[0] - j[2]) ** 2 + (j[1] - j[2]) ** 2
    h, w = curves.shape[-2:]
    # forward differences; the last column/row has zero gradient
    dx = (curves[..., :, 1:] - curves[..., :, :-1]).abs().sum(dim=(-2, -1))
    dy = (curves[..., 1:, :] - curves[..., :-1, :]).abs().sum(dim=(-2, -1))
    smooth = ((dx + dy) / (h * w)).sum(dim=1).mean()
    return gray + lam * smooth


def total_loss(I_L, I_H, I_P, I_N, labels, probs, curves, config: LossConfig,
               feature_backend: FeatureBackend) -> LossReport:
    l_c = contrastive_loss(I_H, I_P, I_N, feature_backend, config.margins, config.contrast_layers)
    l_sc = semantic_consistency_loss(I_H, labels, probs, config.brightness_mode, config.ignore_index)
    l_fr = feature_retention_loss(I_L, I_H, feature_backend, config.retention_layer)
    l_cc = color_constancy_loss(I_H, curves, config.lam)
    terms = {"l_c": l_c, "l_sc": l_sc, "l_fr": l_fr, "l_cc": l_cc}
    total = I_H.new_zeros(())
    for name, value in terms.items():
        w = config.weights.for_term(name)
        if w != 0:
            total = total + w * value
    return LossReport(total=total, weights=config.weights, margins=config.margins, **terms)
