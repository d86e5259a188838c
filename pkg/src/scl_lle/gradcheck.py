"""Finite-difference verification of every loss term's gradient.

Each term is checked twice on a seeded 4x4 instance in float64: with respect
to the enhanced image pixels, and with respect to every enhancer parameter
(through the curve network).  Analytic gradients come from autograd; the
oracle is the central difference ``(L(x + h) - L(x - h)) / 2h``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .enhancer import EnhancerParams, enhance, init_params
from .features import ReferenceBackend
from .losses import (
    LossConfig,
    color_constancy_loss,
    contrastive_loss,
    feature_retention_loss,
    semantic_consistency_loss,
    total_loss,
)
from .segmenter import TinyCNNSegBackend

__all__ = ["GradCheckConfig", "deviation", "finite_difference", "gradient_check", "TERMS_CHECKED"]

TERMS_CHECKED = ("l_c", "l_sc", "l_fr", "l_cc", "total")


@dataclass(frozen=True)
class GradCheckConfig:
    seed: int = 0
    size: int = 4
    num_classes: int = 3
    iterations: int = 2
    width: int = 4
    param_std: float = 0.3
    step: float = 1e-4
    rtol: float = 1e-4
    atol: float = 1e-7
    check_params: bool = True


def deviation(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-7) -> float:
    """Max element-wise relative deviation; differences within ``atol`` count as zero."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= atol, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def finite_difference(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``x`` (mutated in place, restored)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def _instance(cfg: GradCheckConfig):
    gen = torch.Generator().manual_seed(cfg.seed)
    s = cfg.size

    def u(lo, hi, *shape):
        return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)

    inst = {
        "I_L": u(0.05, 0.45, 3, s, s),
        "I_H": u(0.2, 0.6, 3, s, s),
        "I_P": u(0.6, 0.95, 3, s, s),
        "I_N": u(0.0, 0.1, 3, s, s),
        "curves": u(-0.9, 0.9, cfg.iterations, 3, s, s),
        "labels": torch.randint(0, cfg.num_classes, (s, s), generator=gen),
    }
    feat = ReferenceBackend(seed=cfg.seed)
    seg = TinyCNNSegBackend(cfg.num_classes, seed=cfg.seed)
    return inst, feat, seg


def _term_fns(inst, feat, seg, lc: LossConfig):
    """Loss terms as functions of (I_H, curves)."""
    labels = inst["labels"]

    def l_c(h, a):
        return contrastive_loss(h, inst["I_P"], inst["I_N"], feat, lc.margins, lc.contrast_layers)

    def l_sc(h, a):
        return semantic_consistency_loss(h, labels, seg(h), lc.brightness_mode)

    def l_fr(h, a):
        return feature_retention_loss(inst["I_L"], h, feat, lc.retention_layer)

    def l_cc(h, a):
        return color_constancy_loss(h, a, lc.lam)

    def total(h, a):
        return total_loss(inst["I_L"], h, inst["I_P"], inst["I_N"], labels, seg(h), a, lc, feat).total

    return {"l_c": l_c, "l_sc": l_sc, "l_fr": l_fr, "l_cc": l_cc, "total": total}


def gradient_check(config: GradCheckConfig = GradCheckConfig(), loss_config: LossConfig = LossConfig()) -> dict:
    """Return ``{"terms": {name: {...}}, "passed": bool, "seconds": float}``."""
    t0 = time.perf_counter()
    inst, feat, seg = _instance(config)
    fns = _term_fns(inst, feat, seg, loss_config)
    params = init_params(config.seed, config.width, config.iterations, config.param_std, dtype=torch.float64)
    gen = torch.Generator().manual_seed(config.seed + 1)
    for k, t in params.tensors.items():
        if k.endswith("bias"):
            t.copy_(0.1 * torch.randn(t.shape, generator=gen, dtype=torch.float64))
    keys = list(params.tensors)
    results = {}
    for name, fn in fns.items():
        entry = {}
        h = inst["I_H"].clone().requires_grad_(True)
        (g_h,) = torch.autograd.grad(fn(h, inst["curves"]), h)
        h_num = inst["I_H"].clone()
        fd_h = finite_difference(lambda: fn(h_num, inst["curves"]), h_num, config.step)
        entry["wrt_image"] = deviation(g_h.numpy(), fd_h.numpy(), config.atol)

        if config.check_params:
            leaf = EnhancerParams({k: v.clone().requires_grad_(True) for k, v in params.tensors.items()},
                                  params.width, params.iterations)

            def through_network(p: EnhancerParams, fn=fn):
                out, curves = enhance(p, inst["I_L"])
                return fn(out, curves)

            analytic = torch.autograd.grad(through_network(leaf), [leaf.tensors[k] for k in keys])
            work = EnhancerParams({k: v.clone() for k, v in params.tensors.items()}, params.width, params.iterations)
            devs = []
            for k, g in zip(keys, analytic):
                fd = finite_difference(lambda: through_network(work), work.tensors[k], config.step)
                devs.append(deviation(g.numpy(), fd.numpy(), config.atol))
            entry["wrt_params"] = max(devs)
        entry["max_deviation"] = max(v for k, v in entry.items() if k.startswith("wrt"))
        entry["passed"] = entry["max_deviation"] <= config.rtol
        results[name] = entry
    return {
        "terms": results,
        "passed": all(e["passed"] for e in results.values()),
        "tolerance": config.rtol,
        "seconds": time.perf_counter() - t0,
    }
