"""Frozen feature extractors, Gram matrices and the distances built on them."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import archive

__all__ = [
    "FeatureBackend",
    "ReferenceBackend",
    "VGG16Backend",
    "make_feature_backend",
    "extract_features",
    "gram_matrix",
    "gram_set",
    "expectation",
    "gram_distance",
    "expectation_distance",
    "convert_torchvision_vgg16",
    "save_vgg16_weights",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureBackend:
    """Read-only network exposing named activation taps.

    Subclasses fill ``self.tensors`` (frozen parameters) and implement
    ``_forward`` returning every tap in order.
    """

    name = "abstract"
    layers: tuple[str, ...] = ()
    default_retention_layer: str = ""

    def __init__(self) -> None:
        self.tensors: OrderedDict[str, torch.Tensor] = OrderedDict()

    def _freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad_(False)

    def parameter_bytes(self) -> dict[str, bytes]:
        return {k: v.detach().cpu().numpy().tobytes() for k, v in self.tensors.items()}

    def _forward(self, x: torch.Tensor, stop: str) -> OrderedDict[str, torch.Tensor]:
        raise NotImplementedError

    def _param(self, key: str, dtype: torch.dtype) -> torch.Tensor:
        t = self.tensors[key]
        return t if t.dtype == dtype else t.to(dtype)

    def extract(self, img: torch.Tensor, layers: Sequence[str] | None = None) -> OrderedDict[str, torch.Tensor]:
        if not self.tensors:
            raise RuntimeError(f"{self.name} backend has no weights loaded")
        layers = list(self.layers if layers is None else layers)
        if not layers:
            raise ValueError("at least one layer must be requested")
        unknown = [l for l in layers if l not in self.layers]
        if unknown:
            raise KeyError(f"unknown layer(s) {unknown} for {self.name} backend; valid: {list(self.layers)}")
        batched = img.ndim == 4
        x = img if batched else img[None]
        stop = max(layers, key=self.layers.index)
        taps = self._forward(x, stop)
        out = OrderedDict()
        for l in sorted(layers, key=self.layers.index):
            out[l] = taps[l] if batched else taps[l][0]
        return out


class ReferenceBackend(FeatureBackend):
    """Seeded random CNN: four stride-2 3x3 convs (3-16-32-64-128) with ReLU.

    Weights ~ N(0, gain^2 * 2 / fan_in), biases zero.  Takes [0, 1] input as is.
    """

    name = "reference"
    layers = ("relu1", "relu2", "relu3", "relu4")
    default_retention_layer = "relu4"
    channels = (3, 16, 32, 64, 128)

    def __init__(self, seed: int = 0, gain: float = 1.0, zero: bool = False):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        for i in range(4):
            cin, cout = self.channels[i], self.channels[i + 1]
            std = 0.0 if zero else gain * np.sqrt(2.0 / (cin * 9))
            w = torch.randn((cout, cin, 3, 3), generator=gen, dtype=torch.float64) * std
            self.tensors[f"conv{i + 1}.weight"] = w.float()
            self.tensors[f"conv{i + 1}.bias"] = torch.zeros(cout)
        self.seed = int(seed)
        self._freeze()

    def _forward(self, x, stop):
        taps = OrderedDict()
        for i, name in enumerate(self.layers, start=1):
            x = F.relu(F.conv2d(x, self._param(f"conv{i}.weight", x.dtype),
                                self._param(f"conv{i}.bias", x.dtype), stride=2, padding=1))
            taps[name] = x
            if name == stop:
                break
        return taps


# (block, index, out_channels) for the VGG-16 convolutions up to conv4_3.
_VGG_CONVS = [
    (1, 1, 64), (1, 2, 64),
    (2, 1, 128), (2, 2, 128),
    (3, 1, 256), (3, 2, 256), (3, 3, 256),
    (4, 1, 512), (4, 2, 512), (4, 3, 512),
]
_VGG_TAPS = {(1, 2): "relu1_2", (2, 2): "relu2_2", (3, 3): "relu3_3", (4, 3): "relu4_3"}


class VGG16Backend(FeatureBackend):
    """VGG-16 trunk (through relu4_3) loaded from an archive of named float32 arrays.

    Array names follow ``conv{block}_{idx}.weight`` / ``.bias``; the manifest
    carries the ImageNet ``mean``/``std`` used to standardize the input.
    """

    name = "vgg16"
    layers = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
    default_retention_layer = "relu4_3"

    def __init__(self, path: str | Path):
        super().__init__()
        manifest, arrays = archive.load(path)
        cin = 3
        for block, idx, cout in _VGG_CONVS:
            for part, shape in (("weight", (cout, cin, 3, 3)), ("bias", (cout,))):
                key = f"conv{block}_{idx}.{part}"
                if key not in arrays:
                    raise ValueError(f"{path}: missing VGG-16 array {key}")
                if arrays[key].shape != shape:
                    raise ValueError(f"{path}: {key} has shape {arrays[key].shape}, expected {shape}")
                self.tensors[key] = torch.from_numpy(arrays[key])
            cin = cout
        self.mean = torch.tensor(manifest.get("mean", IMAGENET_MEAN), dtype=torch.float64)
        self.std = torch.tensor(manifest.get("std", IMAGENET_STD), dtype=torch.float64)
        self._freeze()

    def _forward(self, x, stop):
        x = (x - self.mean.to(x.dtype)[:, None, None]) / self.std.to(x.dtype)[:, None, None]
        taps = OrderedDict()
        prev_block = 1
        for block, idx, _ in _VGG_CONVS:
            if block != prev_block:
                x = F.max_pool2d(x, 2)
                prev_block = block
            x = F.relu(F.conv2d(x, self._param(f"conv{block}_{idx}.weight", x.dtype),
                                self._param(f"conv{block}_{idx}.bias", x.dtype), padding=1))
            tap = _VGG_TAPS.get((block, idx))
            if tap:
                taps[tap] = x
                if tap == stop:
                    break
        return taps


def convert_torchvision_vgg16(state_dict) -> dict[str, np.ndarray]:
    """Rename a torchvision ``vgg16().state_dict()`` to archive array names."""
    conv_indices = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21]
    out = {}
    for (block, idx, _), layer in zip(_VGG_CONVS, conv_indices):
        for part in ("weight", "bias"):
            out[f"conv{block}_{idx}.{part}"] = np.asarray(state_dict[f"features.{layer}.{part}"], dtype=np.float32)
    return out


def save_vgg16_weights(path, arrays: dict[str, np.ndarray]) -> None:
    archive.save(path, {"kind": "vgg16", "mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)}, arrays)


def make_feature_backend(kind: str = "reference", seed: int = 0, weights: str | None = None,
                         gain: float = 1.0) -> FeatureBackend:
    if kind == "reference":
        return ReferenceBackend(seed=seed, gain=gain)
    if kind == "vgg16":
        if not weights:
            raise ValueError("vgg16 backend needs a weights archive")
        return VGG16Backend(weights)
    raise ValueError(f"unknown feature backend {kind!r}")


def extract_features(backend: FeatureBackend, img: torch.Tensor, layers: Sequence[str] | None = None):
    return backend.extract(img, layers)


def gram_matrix(f: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Channel inner products of a ``(C, H, W)`` (or ``(B, C, H, W)``) map.

    With ``normalize`` the result is divided by ``C * H * W``.
    """
    c, h, w = f.shape[-3:]
    flat = f.reshape(*f.shape[:-3], c, h * w)
    g = flat @ flat.transpose(-1, -2)
    return g / (c * h * w) if normalize else g


def gram_set(features) -> list[torch.Tensor]:
    return [gram_matrix(f) for f in features.values()]


def expectation(img: torch.Tensor) -> torch.Tensor:
    """Mean intensity over channels and pixels."""
    return img.mean(dim=(-3, -2, -1))


def gram_distance(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over layers of the mean squared element difference."""
    if len(a) != len(b) or not a:
        raise ValueError(f"Gram sets have mismatched layer counts {len(a)} vs {len(b)}")
    terms = []
    for ga, gb in zip(a, b):
        if ga.shape[-2:] != gb.shape[-2:]:
            raise ValueError(f"Gram shapes differ: {tuple(ga.shape)} vs {tuple(gb.shape)}")
        terms.append(((ga - gb) ** 2).mean(dim=(-2, -1)))
    return torch.stack(terms).mean(dim=0)


def expectation_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs()
