"""NIQE: distance between an image's MSCN patch statistics and a pristine model.

Follows the reference algorithm: luma on a 0-255 scale, MSCN with a 7x7
Gaussian (sigma 7/6, C=1), 18 GGD/AGGD features per patch at two scales
(full and half resolution), sharpness-based patch selection when fitting, and
``sqrt((mu_p - mu)^T pinv((S_p + S) / 2) (mu_p - mu))`` when scoring.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import correlate
from scipy.special import gamma as gamma_fn

from . import archive

__all__ = ["NiqeModel", "mscn", "patch_features", "fit_niqe", "niqe", "DegenerateImageError"]

_GAM = np.arange(0.2, 10.001, 0.001)
_R_GGD = gamma_fn(1 / _GAM) * gamma_fn(3 / _GAM) / gamma_fn(2 / _GAM) ** 2
_R_AGGD = gamma_fn(2 / _GAM) ** 2 / (gamma_fn(1 / _GAM) * gamma_fn(3 / _GAM))
_SHIFTS = ((0, 1), (1, 0), (1, 1), (-1, 1))
FEATURE_DIM = 36


class DegenerateImageError(ValueError):
    """Image without usable local contrast (e.g. constant)."""


@dataclass
class NiqeModel:
    mean: np.ndarray  # (36,)
    cov: np.ndarray  # (36, 36)
    patch_size: int = 96
    sharpness_threshold: float = 0.75

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.shape != (FEATURE_DIM,) or self.cov.shape != (FEATURE_DIM, FEATURE_DIM):
            raise ValueError(f"NIQE model must be {FEATURE_DIM}-dimensional")

    def save(self, path) -> None:
        manifest = {"kind": "niqe", "patch_size": self.patch_size,
                    "sharpness_threshold": self.sharpness_threshold, "feature_dim": FEATURE_DIM}
        archive.save(path, manifest, {"mean": self.mean, "cov": self.cov})

    @classmethod
    def load(cls, path) -> "NiqeModel":
        if not Path(path).exists():
            raise FileNotFoundError(f"NIQE model file {path} not found")
        manifest, arrays = archive.load(path)
        if manifest.get("kind") != "niqe":
            raise ValueError(f"{path} is not a NIQE model")
        return cls(arrays["mean"].astype(np.float64), arrays["cov"].astype(np.float64),
                   int(manifest["patch_size"]), float(manifest["sharpness_threshold"]))


def _gray255(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img * 255.0


def _gauss7() -> np.ndarray:
    x = np.arange(-3, 4)
    g = np.exp(-0.5 * x ** 2 / (7 / 6) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def mscn(gray: np.ndarray, c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted contrast-normalized coefficients and the local sigma map."""
    w = _gauss7()
    mu = correlate(gray, w, mode="nearest")
    sigma = np.sqrt(np.abs(correlate(gray * gray, w, mode="nearest") - mu * mu))
    return (gray - mu) / (sigma + c), sigma


def _ggd(x: np.ndarray) -> tuple[float, float]:
    sigma_sq = np.mean(x * x)
    e = np.mean(np.abs(x))
    rho = sigma_sq / (e * e)
    return float(_GAM[np.argmin(np.abs(rho - _R_GGD))]), float(sigma_sq)


def _aggd(x: np.ndarray) -> tuple[float, float, float, float]:
    left, right = x[x < 0], x[x > 0]
    lstd = np.sqrt(np.mean(left * left)) if left.size else 0.0
    rstd = np.sqrt(np.mean(right * right)) if right.size else 0.0
    g = lstd / rstd if rstd > 0 else np.inf
    rhat = np.mean(np.abs(x)) ** 2 / np.mean(x * x)
    rhat_norm = rhat * (g ** 3 + 1) * (g + 1) / (g ** 2 + 1) ** 2 if np.isfinite(g) else np.inf
    alpha = float(_GAM[np.argmin((_R_AGGD - rhat_norm) ** 2)])
    const = np.sqrt(gamma_fn(1 / alpha)) / np.sqrt(gamma_fn(3 / alpha))
    mean = (rstd - lstd) * (gamma_fn(2 / alpha) / gamma_fn(1 / alpha)) * const
    return alpha, float(mean), float(lstd ** 2), float(rstd ** 2)


def _block_features(m: np.ndarray) -> list[float]:
    feats = list(_ggd(m))
    for dy, dx in _SHIFTS:
        feats.extend(_aggd(m * np.roll(m, (dy, dx), axis=(0, 1))))
    return feats


def _half(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    im = Image.fromarray(gray.astype(np.float32), mode="F")
    return np.asarray(im.resize((w // 2, h // 2), Image.BICUBIC), dtype=np.float64)


def patch_features(img, patch_size: int = 96) -> tuple[np.ndarray, np.ndarray]:
    """(features ``(n_patches, 36)``, sharpness ``(n_patches,)``)."""
    if patch_size % 2:
        raise ValueError("patch_size must be even")
    gray = _gray255(img)
    h, w = (gray.shape[0] // patch_size) * patch_size, (gray.shape[1] // patch_size) * patch_size
    if h == 0 or w == 0:
        raise ValueError(f"image {gray.shape} smaller than one {patch_size}px patch")
    gray = gray[:h, :w]
    if gray.std() < 1e-6:
        raise DegenerateImageError("image has (near) zero variance; MSCN statistics are undefined")
    feats, sharp = [], None
    for scale, p in ((1, patch_size), (2, patch_size // 2)):
        g = gray if scale == 1 else _half(gray)
        m, sigma = mscn(g)
        rows = []
        sh = []
        for y in range(0, g.shape[0] - p + 1, p):
            for x in range(0, g.shape[1] - p + 1, p):
                rows.append(_block_features(m[y:y + p, x:x + p]))
                sh.append(sigma[y:y + p, x:x + p].mean())
        feats.append(np.asarray(rows))
        if scale == 1:
            sharp = np.asarray(sh)
    return np.hstack(feats), sharp


def _usable(f: np.ndarray) -> np.ndarray:
    return np.all(np.isfinite(f), axis=1)


def fit_niqe(images: Iterable, patch_size: int = 96, sharpness_threshold: float = 0.75) -> NiqeModel:
    """Fit the pristine model from sharp patches of a pristine corpus."""
    chosen = []
    for img in images:
        f, sh = patch_features(img, patch_size)
        keep = (sh > sharpness_threshold * sh.max()) & _usable(f)
        chosen.append(f[keep])
    feats = np.vstack(chosen) if chosen else np.empty((0, FEATURE_DIM))
    if feats.shape[0] < 2:
        raise ValueError("pristine corpus yields fewer than two usable patches")
    return NiqeModel(feats.mean(axis=0), np.cov(feats, rowvar=False), patch_size, sharpness_threshold)


def niqe(img, model: NiqeModel) -> float:
    if model is None:
        raise FileNotFoundError("no NIQE model loaded")
    f, _ = patch_features(img, model.patch_size)
    f = f[_usable(f)]
    if f.shape[0] < 4:
        raise ValueError(f"need at least 4 usable {model.patch_size}px patches, got {f.shape[0]}")
    mu = f.mean(axis=0)
    cov = np.cov(f, rowvar=False)
    d = model.mean - mu
    score = float(np.sqrt(max(d @ np.linalg.pinv((model.cov + cov) / 2.0) @ d, 0.0)))
    return score
