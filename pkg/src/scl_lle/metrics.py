"""Full-reference (PSNR, SSIM), no-reference (NIQE) and segmentation (mIoU) metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .imageio import IMAGE_SUFFIXES, brightness_map, load_image, load_label
from .niqe import NiqeModel, niqe
from .segmenter import IGNORE_INDEX, SegBackend, predict_labels

__all__ = [
    "psnr",
    "ssim",
    "gaussian_window",
    "ConfusionMatrix",
    "confusion_matrix",
    "miou",
    "niqe",
    "NiqeModel",
    "eval_report",
    "ReportError",
    "METRICS",
]

METRICS = ("psnr", "ssim", "niqe", "miou")


class ReportError(ValueError):
    pass


def _as_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0, brightness_mode: str = "mean") -> float:
    """Single-scale SSIM on the brightness channel, averaged over valid windows."""
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {tuple(a.shape[-2:])} is smaller than the {window}x{window} window")
    x = brightness_map(torch.as_tensor(_as_array(a)), brightness_mode).numpy()
    y = brightness_map(torch.as_tensor(_as_array(b)), brightness_mode).numpy()
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2

    def filt(z):
        return convolve2d(z, w, mode="valid")  # w is symmetric: convolution == correlation

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (S, S), rows = ground truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_index
    p, g = pred[keep], gt[keep]
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains labels outside [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def miou(preds: Sequence, gts: Sequence, num_classes: int,
         ignore_index: int = IGNORE_INDEX) -> tuple[list[float | None], float]:
    """Per-class IoU (None for classes absent from both sides) and their mean."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    cm = ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))
    for p, g in zip(preds, gts):
        cm = cm + confusion_matrix(p, g, num_classes, ignore_index)
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = [float(tp[s] / denom[s]) if denom[s] > 0 else None for s in range(num_classes)]
    present = [v for v in per_class if v is not None]
    return per_class, (float(np.mean(present)) if present else float("nan"))


def _stems(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def eval_report(pred_dir, ref_dir, metrics: Iterable[str], out_dir, labels_dir=None,
                niqe_model: NiqeModel | None = None, seg_backend: SegBackend | None = None,
                num_classes: int = 19) -> dict:
    """Score every prediction whose stem also appears in ``ref_dir``.

    Writes ``report.csv`` (one row per image plus a ``mean`` row) and
    ``report.json``.  ``inf`` PSNR values are written as the string "inf".
    ``miou`` segments each prediction with ``seg_backend`` against the label
    maps in ``labels_dir``.
    """
    metrics = [m.strip() for m in metrics if m.strip()]
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ReportError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    preds, refs = _stems(pred_dir), _stems(ref_dir)
    common = sorted(set(preds) & set(refs))
    if not common:
        raise ReportError(f"no common stems between {pred_dir} {sorted(preds)} and {ref_dir} {sorted(refs)}")
    unmatched = sorted(set(preds) ^ set(refs))
    if "niqe" in metrics and niqe_model is None:
        raise ReportError("niqe requested but no NIQE model given")
    labels = {}
    if "miou" in metrics:
        if labels_dir is None or seg_backend is None:
            raise ReportError("miou needs a labels directory and a segmentation backend")
        labels = _stems(Path(labels_dir))
        missing = [s for s in common if s not in labels]
        if missing:
            raise ReportError(f"no label maps for {missing}")

    rows, seg_preds, seg_gts = [], [], []
    for stem in common:
        p = load_image(preds[stem])
        row: dict = {"stem": stem}
        if "psnr" in metrics or "ssim" in metrics:
            r = load_image(refs[stem])
            if "psnr" in metrics:
                row["psnr"] = psnr(p, r)
            if "ssim" in metrics:
                row["ssim"] = ssim(p, r)
        if "niqe" in metrics:
            row["niqe"] = niqe(p, niqe_model)
        if "miou" in metrics:
            gt = load_label(labels[stem])
            pred = predict_labels(seg_backend, p, gt)
            _, row["miou"] = miou([pred], [gt], num_classes)
            seg_preds.append(pred)
            seg_gts.append(gt)
        rows.append(row)

    mean = {"stem": "mean"}
    for m in metrics:
        vals = [r[m] for r in rows]
        mean[m] = float(np.mean(vals)) if all(math.isfinite(v) for v in vals) else (
            math.inf if any(math.isinf(v) for v in vals) else float("nan"))
    if "miou" in metrics:
        per_class, mean["miou_pooled"] = miou(seg_preds, seg_gts, num_classes)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["stem", *metrics]
    with (out_dir / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in [*rows, mean]:
            w.writerow([_fmt(r.get(c)) for c in cols])
    report = {
        "metrics": metrics,
        "rows": [{k: _fmt(v) for k, v in r.items()} for r in rows],
        "mean": {k: _fmt(v) for k, v in mean.items()},
        "unmatched": unmatched,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return report
