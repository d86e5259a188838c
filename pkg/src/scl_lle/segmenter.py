"""Semantic segmentation backends producing per-pixel class probabilities.

Label maps are integer arrays ``(H, W)`` with values in ``[0, S)`` or the
ignore sentinel 255 (Cityscapes trainIds).  Probability maps are ``(S, H, W)``
tensors whose columns sum to one.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import archive

__all__ = [
    "IGNORE_INDEX",
    "CITYSCAPES_CLASSES",
    "as_label_tensor",
    "validate_labels",
    "one_hot",
    "SegBackend",
    "OracleSegBackend",
    "TinyCNNSegBackend",
    "TorchScriptSegBackend",
    "make_seg_backend",
    "segment",
    "predict_labels",
]

IGNORE_INDEX = 255
CITYSCAPES_CLASSES = 19


def as_label_tensor(labels) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        return labels.long()
    return torch.from_numpy(np.asarray(labels, dtype=np.int64))


def validate_labels(labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    t = as_label_tensor(labels)
    if t.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {tuple(t.shape)}")
    valid = t != ignore_index
    if valid.any():
        bad = t[valid]
        if bad.min() < 0 or bad.max() >= num_classes:
            raise ValueError(f"labels outside [0, {num_classes}) found: {sorted(set(bad.unique().tolist()) - set(range(num_classes)))}")
    return t


def one_hot(labels, num_classes: int, ignore_index: int = IGNORE_INDEX,
            dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact one-hot ``(S, H, W)`` plus a validity mask ``(H, W)``.

    Ignored pixels get the uniform distribution 1/S and ``mask == False``.
    """
    t = validate_labels(labels, num_classes, ignore_index)
    mask = t != ignore_index
    safe = torch.where(mask, t, torch.zeros_like(t))
    probs = F.one_hot(safe, num_classes).permute(2, 0, 1).to(dtype)
    probs = torch.where(mask[None], probs, torch.full_like(probs, 1.0 / num_classes))
    return probs, mask


class SegBackend:
    name = "abstract"
    differentiable = True

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        self.tensors: OrderedDict[str, torch.Tensor] = OrderedDict()

    def parameter_bytes(self) -> dict[str, bytes]:
        return {k: v.detach().cpu().numpy().tobytes() for k, v in self.tensors.items()}

    def __call__(self, img: torch.Tensor, labels=None) -> torch.Tensor:
        raise NotImplementedError


class OracleSegBackend(SegBackend):
    """Returns the one-hot ground truth; the image is ignored (zero gradient)."""

    name = "oracle"
    differentiable = False

    def __call__(self, img, labels=None):
        if labels is None:
            raise ValueError("oracle segmenter needs ground-truth labels")
        if img.ndim == 4:
            return torch.stack([self(im, lab) for im, lab in zip(img, labels)])
        probs, _ = one_hot(labels, self.num_classes, dtype=img.dtype)
        if probs.shape[1:] != img.shape[1:]:
            raise ValueError("label map and image sizes differ")
        return probs


class TinyCNNSegBackend(SegBackend):
    """Seeded three-layer fully convolutional net with a softmax head."""

    name = "tinycnn"

    def __init__(self, num_classes: int, seed: int = 0, width: int = 16,
                 arrays: dict[str, np.ndarray] | None = None):
        super().__init__(num_classes)
        shapes = [(width, 3), (width, width), (num_classes, width)]
        gen = torch.Generator().manual_seed(int(seed))
        for i, (cout, cin) in enumerate(shapes, start=1):
            if arrays is not None:
                w = torch.from_numpy(arrays[f"conv{i}.weight"])
                b = torch.from_numpy(arrays[f"conv{i}.bias"])
                if tuple(w.shape) != (cout, cin, 3, 3):
                    raise ValueError(f"conv{i}.weight has shape {tuple(w.shape)}")
            else:
                w = (torch.randn((cout, cin, 3, 3), generator=gen, dtype=torch.float64)
                     * np.sqrt(2.0 / (cin * 9))).float()
                b = (torch.randn(cout, generator=gen, dtype=torch.float64) * 0.1).float()
            self.tensors[f"conv{i}.weight"] = w.requires_grad_(False)
            self.tensors[f"conv{i}.bias"] = b.requires_grad_(False)
        self.width = width

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        p = {k: (v if v.dtype == x.dtype else v.to(x.dtype)) for k, v in self.tensors.items()}
        x = F.relu(F.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1))
        x = F.relu(F.conv2d(x, p["conv2.weight"], p["conv2.bias"], padding=1))
        return F.conv2d(x, p["conv3.weight"], p["conv3.bias"], padding=1)

    def __call__(self, img, labels=None):
        batched = img.ndim == 4
        x = img if batched else img[None]
        probs = torch.softmax(self.logits(x), dim=1)
        return probs if batched else probs[0]


class TorchScriptSegBackend(SegBackend):
    """Frozen TorchScript model (e.g. an exported DeepLabv3+) returning logits.

    The model receives ImageNet-standardized ``(B, 3, H, W)`` input; a dict
    output uses its ``"out"`` entry.  Logits are resized to the input size.
    """

    name = "deeplab"

    def __init__(self, path: str | Path, num_classes: int = CITYSCAPES_CLASSES,
                 mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)):
        super().__init__(num_classes)
        self.module = torch.jit.load(str(path), map_location="cpu").eval()
        for v in self.module.parameters():
            v.requires_grad_(False)
        for k, v in self.module.state_dict().items():
            self.tensors[k] = v
        self.mean = torch.tensor(mean)
        self.std = torch.tensor(std)

    def __call__(self, img, labels=None):
        batched = img.ndim == 4
        x = img if batched else img[None]
        x = (x - self.mean.to(x.dtype)[:, None, None]) / self.std.to(x.dtype)[:, None, None]
        out = self.module(x)
        if isinstance(out, dict):
            out = out["out"]
        if out.shape[1] != self.num_classes:
            raise ValueError(f"model produced {out.shape[1]} classes, expected {self.num_classes}")
        if out.shape[-2:] != x.shape[-2:]:
            out = F.interpolate(out, size=x.shape[-2:], mode="bilinear", align_corners=False)
        probs = torch.softmax(out, dim=1)
        return probs if batched else probs[0]


def make_seg_backend(kind: str, num_classes: int, seed: int = 0, weights: str | None = None) -> SegBackend:
    if kind == "oracle":
        return OracleSegBackend(num_classes)
    if kind == "tinycnn":
        if weights:
            manifest, arrays = archive.load(weights)
            return TinyCNNSegBackend(num_classes, width=int(manifest.get("width", 16)), arrays=arrays)
        return TinyCNNSegBackend(num_classes, seed=seed)
    if kind == "deeplab":
        if not weights:
            raise ValueError("deeplab backend needs a TorchScript weights file")
        return TorchScriptSegBackend(weights, num_classes)
    raise ValueError(f"unknown segmentation backend {kind!r}")


def segment(backend: SegBackend, img: torch.Tensor, labels=None) -> torch.Tensor:
    if not isinstance(backend, SegBackend):
        raise RuntimeError("segmentation backend is not initialized")
    return backend(img, labels)


def predict_labels(backend: SegBackend, img: torch.Tensor, labels=None) -> np.ndarray:
    with torch.no_grad():
        probs = segment(backend, img, labels)
    return probs.argmax(dim=0).cpu().numpy().astype(np.int64)
