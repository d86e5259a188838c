"""Image I/O, resizing, gamma darkening and brightness statistics.

Images travel through the package as ``torch.Tensor`` of shape ``(3, H, W)``
with values in ``[0, 1]``.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageFormatError",
    "HistogramStats",
    "validate_image",
    "load_image",
    "load_label",
    "save_image",
    "save_label",
    "to_uint8",
    "resize",
    "resize_labels",
    "gamma_darken",
    "brightness_map",
    "histogram",
    "IMAGE_SUFFIXES",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Rec.601 luma weights, used when brightness_mode == "luma".
_LUMA = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Raised for images that decode but are not 8/16-bit RGB or grayscale."""


def validate_image(img: torch.Tensor) -> torch.Tensor:
    if not isinstance(img, torch.Tensor):
        raise TypeError(f"expected a torch.Tensor image, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must have shape (3, H, W), got {tuple(img.shape)}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError("image must have positive height and width")
    if not torch.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


def _decode(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as probe:
            fmt, mode = probe.format, probe.mode
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a recognisable image") from exc
    if fmt not in ("PNG", "JPEG"):
        raise ImageFormatError(f"{path}: unsupported container {fmt!r} (PNG or JPEG only)")
    if mode == "CMYK":
        raise ImageFormatError(f"{path}: CMYK images are not supported")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: could not decode")
    if raw.dtype not in (np.uint8, np.uint16):
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    return raw


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Read a PNG/JPEG into a float32 ``(3, H, W)`` tensor in [0, 1].

    Grayscale is replicated to three channels, alpha is dropped and 16-bit
    data is scaled by 1/65535.
    """
    path = Path(path)
    raw = _decode(path)
    scale = 255.0 if raw.dtype == np.uint8 else 65535.0
    if raw.ndim == 2:
        rgb = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 1:
        rgb = np.repeat(raw, 3, axis=2)
    elif raw.shape[2] in (3, 4):
        rgb = raw[:, :, 2::-1]  # BGR(A) -> RGB
    else:
        raise ImageFormatError(f"{path}: unsupported channel count {raw.shape[2]}")
    arr = rgb.astype(np.float64) / scale
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def load_label(path: str | os.PathLike) -> np.ndarray:
    """Read a single-channel 8-bit label PNG (Cityscapes trainIds) as int64."""
    path = Path(path)
    raw = _decode(path)
    if raw.ndim != 2 or raw.dtype != np.uint8:
        raise ImageFormatError(f"{path}: label maps must be single-channel 8-bit")
    return raw.astype(np.int64)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Quantize to an ``(H, W, 3)`` uint8 array with round-half-up."""
    validate_image(img)
    arr = img.detach().to(torch.float64).cpu().numpy().transpose(1, 2, 0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_image(img: torch.Tensor, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def save_label(labels: np.ndarray, path: str | os.PathLike) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def resize(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize, half-pixel centres (align_corners=False)."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if tuple(img.shape[1:]) == (out_h, out_w):
        return img.clone()
    out = F.interpolate(img[None], size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0].clamp(0.0, 1.0)


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of an integer label map (never invents classes)."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def gamma_darken(img: torch.Tensor, gamma: float) -> torch.Tensor:
    """Element-wise ``img ** gamma``; only darkening (gamma >= 1) is allowed."""
    if not gamma >= 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if gamma == 1.0:
        return img.clone()
    return img.pow(gamma)


def brightness_map(img: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Per-pixel brightness ``(H, W)``: channel mean, or Rec.601 luma."""
    if mode == "mean":
        return img.mean(dim=0)
    if mode == "luma":
        w = torch.tensor(_LUMA, dtype=img.dtype, device=img.device)
        return (img * w[:, None, None]).sum(dim=0).clamp(0.0, 1.0)
    raise ValueError(f"unknown brightness_mode {mode!r}")


@dataclass(frozen=True)
class HistogramStats:
    bins: np.ndarray  # (3, 256) int64 counts
    mean_brightness: float


def histogram(img: torch.Tensor, mode: str = "mean") -> HistogramStats:
    q = to_uint8(img)
    bins = np.stack([np.bincount(q[:, :, c].ravel(), minlength=256) for c in range(3)])
    mean_b = float(brightness_map(img.detach().to(torch.float64), mode).mean())
    return HistogramStats(bins=bins.astype(np.int64), mean_brightness=mean_b)
