"""Curve-estimation network and iterative pixel-correction curves.

The network is a plain 7-layer 3x3 convolution stack with symmetric skip
concatenations (conv5 <- [x3, x4], conv6 <- [x2, x5], conv7 <- [x1, x6]) and a
tanh head producing ``3 * M`` curve maps.  Parameters live in an ordered dict
of tensors so the forward pass is a pure function of ``(params, image)``.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import archive

__all__ = [
    "EnhancerParams",
    "init_params",
    "zero_params",
    "estimate_curves",
    "apply_curves",
    "enhance",
    "save_params",
    "load_params",
]

PARAMS_VERSION = "scl-lle-enhancer/1"
NUM_LAYERS = 7
_PREFIX = "enhancer."


def _layer_shapes(width: int, iterations: int) -> list[tuple[int, int]]:
    """(in_channels, out_channels) for conv1..conv7."""
    return [
        (3, width),
        (width, width),
        (width, width),
        (width, width),
        (2 * width, width),
        (2 * width, width),
        (2 * width, 3 * iterations),
    ]


@dataclass
class EnhancerParams:
    tensors: "OrderedDict[str, torch.Tensor]"
    width: int = 32
    iterations: int = 8
    meta: dict = field(default_factory=dict)

    @property
    def version(self) -> str:
        return PARAMS_VERSION

    def fingerprint(self) -> str:
        """Hash of the architecture config (not the weights)."""
        cfg = {"width": self.width, "iterations": self.iterations, "layers": NUM_LAYERS, "kernel": 3}
        return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "EnhancerParams":
        return EnhancerParams(
            OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()),
            self.width, self.iterations, dict(self.meta),
        )

    def to(self, dtype: torch.dtype) -> "EnhancerParams":
        return EnhancerParams(
            OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()),
            self.width, self.iterations, dict(self.meta),
        )

    def check(self) -> None:
        for i, (cin, cout) in enumerate(_layer_shapes(self.width, self.iterations), start=1):
            w = self.tensors.get(f"conv{i}.weight")
            b = self.tensors.get(f"conv{i}.bias")
            if w is None or b is None:
                raise ValueError(f"missing parameters for conv{i}")
            if tuple(w.shape) != (cout, cin, 3, 3) or tuple(b.shape) != (cout,):
                raise ValueError(f"conv{i}: shapes {tuple(w.shape)}/{tuple(b.shape)} do not match architecture")
        for k, v in self.tensors.items():
            if not torch.isfinite(v).all():
                raise ValueError(f"parameter {k} contains non-finite values")


def init_params(seed: int = 0, width: int = 32, iterations: int = 8, std: float = 0.02,
                dtype: torch.dtype = torch.float32) -> EnhancerParams:
    """Weights ~ N(0, std^2), biases zero, drawn from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for i, (cin, cout) in enumerate(_layer_shapes(width, iterations), start=1):
        w = torch.randn((cout, cin, 3, 3), generator=gen, dtype=torch.float64) * std
        tensors[f"conv{i}.weight"] = w.to(dtype)
        tensors[f"conv{i}.bias"] = torch.zeros(cout, dtype=dtype)
    return EnhancerParams(tensors, width, iterations, {"seed": int(seed)})


def zero_params(width: int = 32, iterations: int = 8, dtype: torch.dtype = torch.float32) -> EnhancerParams:
    p = init_params(0, width, iterations, std=0.0, dtype=dtype)
    p.meta = {"seed": None}
    return p


def _check_size(h: int, w: int) -> None:
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise ValueError(f"enhancer input must be at least 4x4 with sides divisible by 4, got {h}x{w}")


def estimate_curves(params: EnhancerParams, img: torch.Tensor) -> torch.Tensor:
    """Curve maps in [-1, 1]: ``(M, 3, H, W)``, or ``(B, M, 3, H, W)`` for batches."""
    batched = img.ndim == 4
    x = img if batched else img[None]
    if x.shape[1] != 3:
        raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
    _check_size(x.shape[2], x.shape[3])
    p = params.tensors

    def conv(i: int, t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)

    x1 = F.relu(conv(1, x))
    x2 = F.relu(conv(2, x1))
    x3 = F.relu(conv(3, x2))
    x4 = F.relu(conv(4, x3))
    x5 = F.relu(conv(5, torch.cat([x3, x4], dim=1)))
    x6 = F.relu(conv(6, torch.cat([x2, x5], dim=1)))
    a = torch.tanh(conv(7, torch.cat([x1, x6], dim=1)))
    b, _, h, w = a.shape
    a = a.view(b, params.iterations, 3, h, w)
    return a if batched else a[0]


def apply_curves(img: torch.Tensor, curves: torch.Tensor) -> torch.Tensor:
    """Iterate ``x <- x + a_m * x * (1 - x)`` for m = 1..M, per channel."""
    if curves.ndim != img.ndim + 1 or curves.shape[-3:] != img.shape[-3:] or curves.shape[:-4] != img.shape[:-3]:
        raise ValueError(f"curve stack {tuple(curves.shape)} does not match image {tuple(img.shape)}")
    x = img
    for m in range(curves.shape[-4]):
        a = curves[..., m, :, :, :]
        x = x + a * (x * (1 - x))
    return x


def enhance(params: EnhancerParams, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    curves = estimate_curves(params, img)
    return apply_curves(img, curves), curves


def save_params(path, params: EnhancerParams, extra_manifest: dict | None = None,
                extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    manifest = {
        "kind": "enhancer",
        "version": PARAMS_VERSION,
        "architecture": {"width": params.width, "layers": NUM_LAYERS, "kernel": 3},
        "M": params.iterations,
        "fingerprint": params.fingerprint(),
        "brightness_mode": params.meta.get("brightness_mode", "mean"),
        "seed": params.meta.get("seed"),
        "iteration": int(params.meta.get("iteration", 0)),
    }
    manifest.update(extra_manifest or {})
    arrays = {_PREFIX + k: v.detach().cpu().numpy() for k, v in params.tensors.items()}
    arrays.update(extra_arrays or {})
    archive.save(path, manifest, arrays)


def load_params(path) -> EnhancerParams:
    manifest, arrays = archive.load(path)
    if manifest.get("kind") != "enhancer":
        raise archive.ArchiveError(path, 0, f"not an enhancer checkpoint (kind={manifest.get('kind')!r})")
    width = int(manifest["architecture"]["width"])
    iterations = int(manifest["M"])
    tensors = OrderedDict()
    for i in range(1, NUM_LAYERS + 1):
        for part in ("weight", "bias"):
            key = f"conv{i}.{part}"
            if _PREFIX + key not in arrays:
                raise ValueError(f"{path}: checkpoint lacks {key}")
            tensors[key] = torch.from_numpy(arrays[_PREFIX + key])
    meta = {k: manifest.get(k) for k in ("seed", "iteration", "brightness_mode")}
    params = EnhancerParams(tensors, width, iterations, meta)
    params.check()
    if manifest.get("fingerprint") not in (None, params.fingerprint()):
        raise ValueError(f"{path}: architecture fingerprint mismatch")
    return params
