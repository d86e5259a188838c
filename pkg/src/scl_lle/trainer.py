"""Optimization loop: enhance -> segment -> losses -> Adam on enhancer weights.

Feature and segmentation backends are frozen; only ``EnhancerParams`` change.
Checkpoints carry the Adam moments so a resumed run reproduces an
uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import archive
from .data import DatasetLayout, RngState, SampleBank, TrainBatch, epoch_order, make_batch, scan_dataset
from .enhancer import EnhancerParams, enhance, init_params, load_params, save_params
from .features import FeatureBackend, make_feature_backend
from .losses import TERMS, LossConfig, LossReport, LossWeights, Margins, total_loss
from .segmenter import SegBackend, make_seg_backend, segment

__all__ = [
    "TrainConfig",
    "ConfigError",
    "NonFiniteLossError",
    "AdamState",
    "Backends",
    "build_backends",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "LOG_NAME",
]

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"
_STEP_STRIDE = 1 << 16  # RNG counter space reserved per step


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    max_epochs: int = 50
    max_steps: int | None = None
    alpha: float = 0.3
    beta: float = 0.04
    lam: float = 200.0
    w_c: float = 1.0
    w_sc: float = 1.0
    w_fr: float = 1.0
    w_cc: float = 1.0
    iterations: int = 8
    width: int = 32
    init_std: float = 0.02
    seed: int = 0
    feature_backend: str = "reference"
    feature_weights: str | None = None
    feature_gain: float = 1.0
    contrast_layers: list | None = None
    retention_layer: str | None = None
    seg_backend: str = "tinycnn"
    seg_weights: str | None = None
    num_classes: int = 19
    brightness_mode: str = "mean"
    image_size: int = 384
    augment: bool = True
    augment_fraction: float = 0.5
    gamma_range: tuple = (1.5, 5.0)
    random_crop: bool = False
    use_neg_over: bool = True
    use_neg_under: bool = True
    grad_clip: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    tag: str = ""

    def __post_init__(self):
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1 (got {self.max_epochs})")
        if self.max_steps is not None and self.max_steps < 0:
            problems.append(f"max_steps must be >= 0 (got {self.max_steps})")
        for k in ("w_c", "w_sc", "w_fr", "w_cc", "alpha", "beta", "lam"):
            if getattr(self, k) < 0:
                problems.append(f"{k} must be >= 0 (got {getattr(self, k)})")
        if self.iterations < 1:
            problems.append("iterations (M) must be >= 1")
        if self.image_size < 4 or self.image_size % 4:
            problems.append(f"image_size must be a positive multiple of 4 (got {self.image_size})")
        g0, g1 = self.gamma_range
        if not 1.0 <= g0 <= g1:
            problems.append(f"gamma_range must satisfy 1 <= lo <= hi (got {self.gamma_range})")
        if not 0.0 <= self.augment_fraction <= 1.0:
            problems.append("augment_fraction must lie in [0, 1]")
        if self.brightness_mode not in ("mean", "luma"):
            problems.append(f"unknown brightness_mode {self.brightness_mode!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "gamma_range" in d:
            d["gamma_range"] = tuple(d["gamma_range"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        return d

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margins=Margins(self.alpha, self.beta),
            weights=LossWeights(self.w_c, self.w_sc, self.w_fr, self.w_cc),
            lam=self.lam,
            brightness_mode=self.brightness_mode,
            contrast_layers=tuple(self.contrast_layers) if self.contrast_layers else None,
            retention_layer=self.retention_layer,
        )


@dataclass
class AdamState:
    m: "OrderedDict[str, torch.Tensor]"
    v: "OrderedDict[str, torch.Tensor]"
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: EnhancerParams, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        m = OrderedDict((k, torch.zeros_like(t)) for k, t in params.tensors.items())
        v = OrderedDict((k, torch.zeros_like(t)) for k, t in params.tensors.items())
        return cls(m, v, 0, beta1, beta2, eps)

    def clone(self) -> "AdamState":
        return AdamState(OrderedDict((k, t.clone()) for k, t in self.m.items()),
                         OrderedDict((k, t.clone()) for k, t in self.v.items()),
                         self.step, self.beta1, self.beta2, self.eps)


class Backends(NamedTuple):
    features: FeatureBackend
    seg: SegBackend


def build_backends(config: TrainConfig) -> Backends:
    return Backends(
        make_feature_backend(config.feature_backend, seed=config.seed, weights=config.feature_weights,
                             gain=config.feature_gain),
        make_seg_backend(config.seg_backend, config.num_classes, seed=config.seed, weights=config.seg_weights),
    )


def batch_loss(params: EnhancerParams, batch: TrainBatch, backends: Backends,
               loss_config: LossConfig) -> tuple[LossReport, torch.Tensor]:
    """Mean of per-sample reports, reduced in ascending batch index."""
    enhanced, curves = enhance(params, batch.inputs)
    probs = segment(backends.seg, enhanced, batch.labels)
    reports = []
    for i in range(len(batch)):
        neg = batch.negatives[i] if batch.negatives is not None else None
        reports.append(total_loss(batch.inputs[i], enhanced[i], batch.positives[i], neg,
                                  batch.labels[i], probs[i], curves[i], loss_config, backends.features))
    n = len(reports)
    mean = {k: sum(getattr(r, k) for r in reports) / n for k in (*TERMS, "total")}
    return LossReport(weights=loss_config.weights, margins=loss_config.margins, **mean), enhanced


def _adam_update(params: EnhancerParams, grads: dict, adam: AdamState, lr: float) -> tuple[EnhancerParams, AdamState]:
    new_p, new_s = params.clone(), adam.clone()
    new_s.step += 1
    b1, b2 = adam.beta1, adam.beta2
    c1, c2 = 1 - b1 ** new_s.step, 1 - b2 ** new_s.step
    for k, g in grads.items():
        m = new_s.m[k].mul_(b1).add_(g, alpha=1 - b1)
        v = new_s.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(adam.eps)
        new_p.tensors[k].addcdiv_(m, denom, value=-lr / c1)
    return new_p, new_s


def train_step(params: EnhancerParams, adam: AdamState, batch: TrainBatch, backends: Backends,
               config: TrainConfig) -> tuple[EnhancerParams, AdamState, LossReport]:
    """One Adam step; inputs are left untouched."""
    leaf = EnhancerParams(
        OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.tensors.items()),
        params.width, params.iterations, dict(params.meta),
    )
    report, _ = batch_loss(leaf, batch, backends, config.loss_config())
    for name in (*TERMS, "total"):
        value = float(torch.as_tensor(getattr(report, name)).detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss term {name} = {value} (weights {report.weights}, margins {report.margins})")
    keys = list(leaf.tensors)
    if report.total.requires_grad:
        raw = torch.autograd.grad(report.total, [leaf.tensors[k] for k in keys], allow_unused=True)
    else:
        raw = [None] * len(keys)
    grads = OrderedDict((k, torch.zeros_like(params.tensors[k]) if g is None else g.detach())
                        for k, g in zip(keys, raw))
    if config.grad_clip:
        norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
        if norm > config.grad_clip:
            scale = float(config.grad_clip / norm)
            grads = OrderedDict((k, g * scale) for k, g in grads.items())
    new_params, new_adam = _adam_update(params, grads, adam, config.lr)
    new_params.meta["iteration"] = int(params.meta.get("iteration", 0)) + 1
    detached = LossReport(**{k: getattr(report, k).detach() for k in (*TERMS, "total")},
                          weights=report.weights, margins=report.margins)
    return new_params, new_adam, detached


def save_checkpoint(path, params: EnhancerParams, adam: AdamState, config: TrainConfig, step: int) -> None:
    params.meta.setdefault("brightness_mode", config.brightness_mode)
    params.meta["seed"] = config.seed
    params.meta["iteration"] = step
    extra_arrays = {}
    for k in params.tensors:
        extra_arrays[f"adam.m.{k}"] = adam.m[k].numpy()
        extra_arrays[f"adam.v.{k}"] = adam.v[k].numpy()
    extra = {
        "step": step,
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "config": config.to_dict(),
    }
    save_params(path, params, extra, extra_arrays)


def load_checkpoint(path) -> tuple[EnhancerParams, AdamState | None, TrainConfig | None, int]:
    params = load_params(path)
    manifest, arrays = archive.load(path)
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        m = OrderedDict((k, torch.from_numpy(arrays[f"adam.m.{k}"])) for k in params.tensors)
        v = OrderedDict((k, torch.from_numpy(arrays[f"adam.v.{k}"])) for k in params.tensors)
        adam = AdamState(m, v, int(a["step"]), float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
    config = TrainConfig.from_dict(manifest["config"]) if "config" in manifest else None
    return params, adam, config, int(manifest.get("step", params.meta.get("iteration") or 0))


def _rewrite_log(path: Path, keep_through: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["step"] <= keep_through]
    path.write_text("".join(line + "\n" for line in kept))


def train(config: TrainConfig, data_root, out_dir, resume=None,
          layout: DatasetLayout = DatasetLayout()) -> Path:
    """Train and return the path of the final checkpoint (``final.ckpt``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, bank = scan_dataset(data_root, layout, contrastive=config.w_c > 0)
    bank = bank.restricted(config.use_neg_over, config.use_neg_under)
    bank.validate(config.w_c > 0)
    backends = build_backends(config)

    steps_per_epoch = math.ceil(len(records) / config.batch_size)
    total_steps = config.max_steps if config.max_steps is not None else config.max_epochs * steps_per_epoch

    if resume:
        params, adam, _, start = load_checkpoint(resume)
        if adam is None:
            raise ConfigError(f"{resume} has no optimizer state; cannot resume")
        params = params.to(torch.float32)
    else:
        params = init_params(config.seed, config.width, config.iterations, config.init_std)
        adam = AdamState.zeros_like(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
        start = 0
    params.meta["brightness_mode"] = config.brightness_mode

    log_path = out_dir / LOG_NAME
    if resume:
        _rewrite_log(log_path, start)
    elif log_path.exists():
        log_path.unlink()

    with log_path.open("a") as fh:
        for step in range(start, total_steps):
            epoch, pos = divmod(step, steps_per_epoch)
            order = epoch_order(len(records), config.seed, epoch)
            idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            batch = make_batch([records[i] for i in idx], bank, RngState(config.seed, step * _STEP_STRIDE), config)
            params, adam, report = train_step(params, adam, batch, backends, config)
            row = {"step": step + 1, **report.as_dict()}
            fh.write(json.dumps(row) + "\n")
            fh.flush()
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"step_{step + 1:07d}.ckpt", params, adam, config, step + 1)
            if (step + 1) % 50 == 0:
                log.info("step %d/%d total=%.5f", step + 1, total_steps, row["total"])
    final = out_dir / "final.ckpt"
    save_checkpoint(final, params, adam, config, total_steps)
    return final
