"""Dataset scanning, unpaired positive/negative sampling and batch assembly.

Expected layout under a data root::

    inputs/*.png            low-light inputs (Cityscapes-style)
    labels/*.png            trainId label maps, same stems as inputs
    positives/*.png         normal-light images
    negatives/over/*.png    overexposed images
    negatives/under/*.png   underexposed images

Randomness is counter based: every draw is a function of ``(seed, step)``
plus a stream tag, so resumed or prefetched runs see identical samples.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .imageio import IMAGE_SUFFIXES, gamma_darken, load_image, load_label, resize, resize_labels

__all__ = [
    "DatasetLayout",
    "DatasetError",
    "TrainRecord",
    "SampleBank",
    "RngState",
    "TrainBatch",
    "scan_dataset",
    "sample_contrastive_pair",
    "draw_gamma",
    "make_batch",
    "epoch_order",
]

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
# stream tags keep independent draws apart for the same (seed, step)
_STREAM_PAIR = 1
_STREAM_AUG = 2
_STREAM_SHUFFLE = 3
_STREAM_CROP = 4


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetLayout:
    inputs: str = "inputs"
    labels: str = "labels"
    positives: str = "positives"
    neg_over: str = "negatives/over"
    neg_under: str = "negatives/under"


@dataclass(frozen=True)
class TrainRecord:
    image: Path
    label: Path
    gamma: float | None = None


@dataclass(frozen=True)
class SampleBank:
    positives: tuple[Path, ...]
    neg_over: tuple[Path, ...]
    neg_under: tuple[Path, ...]
    rng_seed: int = 0
    use_over: bool = True
    use_under: bool = True

    @property
    def use_negatives(self) -> bool:
        return self.use_over or self.use_under

    def restricted(self, use_over: bool = True, use_under: bool = True) -> "SampleBank":
        """Bank with disabled negative pools emptied (ablation settings)."""
        return replace(
            self,
            neg_over=self.neg_over if use_over else (),
            neg_under=self.neg_under if use_under else (),
            use_over=self.use_over and use_over,
            use_under=self.use_under and use_under,
        )

    def validate(self, contrastive: bool = True) -> None:
        if not contrastive:
            return
        if not self.positives:
            raise DatasetError("positive pool is empty but the contrastive loss is enabled")
        if self.use_over and not self.neg_over:
            raise DatasetError("overexposed negative pool is enabled but empty")
        if self.use_under and not self.neg_under:
            raise DatasetError("underexposed negative pool is enabled but empty")


@dataclass(frozen=True)
class RngState:
    seed: int
    counter: int = 0

    def generator(self, stream: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.counter, stream, *extra])

    def advance(self, n: int = 1) -> "RngState":
        return RngState(self.seed, self.counter + n)


@dataclass
class TrainBatch:
    inputs: torch.Tensor  # (B, 3, S, S)
    labels: torch.Tensor  # (B, S, S) int64
    positives: torch.Tensor  # (B, 3, S, S)
    negatives: torch.Tensor | None  # (B, 3, S, S) or None without negatives
    gammas: list = field(default_factory=list)
    refs: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _list_images(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _image_size(p: Path) -> tuple[int, int]:
    with Image.open(p) as im:
        return im.size  # (W, H)


def _digest(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _file_key(p: Path) -> list:
    st = p.stat()
    return [st.st_size, st.st_mtime_ns]


def scan_dataset(root: str | os.PathLike, layout: DatasetLayout = DatasetLayout(),
                 contrastive: bool = True, use_cache: bool = True) -> tuple[list[TrainRecord], SampleBank]:
    """List training records and the sample bank; results are sorted by name.

    A ``manifest.json`` in the root caches sizes and checksums; files whose
    size and mtime are unchanged are not re-validated.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"data root {root} does not exist")
    in_dir, lab_dir = root / layout.inputs, root / layout.labels
    for d in (in_dir, lab_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")

    cache_path = root / MANIFEST_NAME
    cache: dict = {}
    if use_cache and cache_path.exists():
        try:
            cache = json.loads(cache_path.read_text()).get("files", {})
        except (json.JSONDecodeError, AttributeError):
            log.warning("ignoring unreadable scan cache %s", cache_path)
    files: dict[str, dict] = {}

    def check(p: Path) -> dict:
        rel = str(p.relative_to(root))
        key = _file_key(p)
        hit = cache.get(rel)
        if hit is None or hit.get("key") != key:
            w, h = _image_size(p)
            hit = {"key": key, "size": [h, w], "sha256": _digest(p)}
        files[rel] = hit
        return hit

    labels_by_stem = {p.stem: p for p in _list_images(lab_dir)}
    records, problems = [], []
    for img in _list_images(in_dir):
        lab = labels_by_stem.get(img.stem)
        if lab is None:
            problems.append(f"{img.name}: no label file in {lab_dir}")
            continue
        si, sl = check(img)["size"], check(lab)["size"]
        if si != sl:
            problems.append(f"{img.name} is {si[0]}x{si[1]} but {lab.name} is {sl[0]}x{sl[1]}")
            continue
        records.append(TrainRecord(img, lab))
    if problems:
        raise DatasetError("dataset problems:\n  " + "\n  ".join(problems))
    if not records:
        raise DatasetError(f"no input images found in {in_dir}")

    pools = {}
    for name in ("positives", "neg_over", "neg_under"):
        paths = _list_images(root / getattr(layout, name))
        for p in paths:
            check(p)
        pools[name] = tuple(paths)
    bank = SampleBank(pools["positives"], pools["neg_over"], pools["neg_under"])
    bank.validate(contrastive)

    log.info("scanned %s: %d inputs, %d positives, %d over / %d under negatives", root,
             len(records), len(bank.positives), len(bank.neg_over), len(bank.neg_under))
    if use_cache and files != cache:
        try:
            cache_path.write_text(json.dumps({"files": files}, indent=1, sort_keys=True))
        except OSError as exc:
            log.warning("could not write scan cache %s: %s", cache_path, exc)
    return records, bank


def sample_contrastive_pair(bank: SampleBank, rng_state: RngState) -> tuple[Path, Path | None, RngState]:
    """Uniform positive; negative from a 50/50 pool choice, then uniform within.

    Returns ``None`` for the negative when the bank has negatives disabled.
    """
    if not bank.positives:
        raise DatasetError("positive pool is empty")
    rng = rng_state.generator(_STREAM_PAIR)
    pos = bank.positives[int(rng.integers(len(bank.positives)))]
    pools = [p for p, on in ((bank.neg_over, bank.use_over), (bank.neg_under, bank.use_under)) if on]
    if not pools:
        return pos, None, rng_state.advance()
    if any(not p for p in pools):
        raise DatasetError("an enabled negative pool is empty")
    pool = pools[int(rng.integers(len(pools)))] if len(pools) > 1 else pools[0]
    neg = pool[int(rng.integers(len(pool)))]
    return pos, neg, rng_state.advance()


def draw_gamma(rng: np.random.Generator, fraction: float, gamma_range: Sequence[float]) -> float | None:
    """Gamma for one input, or None when this input is not augmented."""
    u, g = rng.random(), rng.uniform(gamma_range[0], gamma_range[1])
    return float(g) if u < fraction else None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, _STREAM_SHUFFLE]).permutation(n)


@lru_cache(maxsize=512)
def _cached_image(path: str, key: tuple) -> torch.Tensor:
    return load_image(path)


@lru_cache(maxsize=512)
def _cached_label(path: str, key: tuple) -> np.ndarray:
    return load_label(path)


def _image(p: Path) -> torch.Tensor:
    return _cached_image(str(p), tuple(_file_key(p)))


def _label(p: Path) -> np.ndarray:
    return _cached_label(str(p), tuple(_file_key(p)))


def _square_crop(h: int, w: int, rng: np.random.Generator) -> tuple[int, int, int]:
    side = min(h, w)
    return int(rng.integers(h - side + 1)), int(rng.integers(w - side + 1)), side


def make_batch(records: Sequence[TrainRecord], bank: SampleBank, rng_state: RngState, config) -> TrainBatch:
    """Assemble one batch at ``config.image_size`` (square).

    Reads ``image_size``, ``augment_fraction``, ``gamma_range``,
    ``random_crop`` and ``augment`` from ``config``.
    """
    if not records:
        raise ValueError("batch needs at least one record")
    size = int(config.image_size)
    ins, labs, poss, negs, gammas, refs = [], [], [], [], [], []
    state = rng_state
    for i, rec in enumerate(records):
        img = _image(rec.image)
        lab = _label(rec.label)
        if config.random_crop:
            y, x, side = _square_crop(img.shape[1], img.shape[2], state.generator(_STREAM_CROP, i))
            img = img[:, y:y + side, x:x + side]
            lab = lab[y:y + side, x:x + side]
        img = resize(img, size, size)
        lab = resize_labels(lab, size, size)
        gamma = rec.gamma
        if gamma is None and config.augment:
            gamma = draw_gamma(state.generator(_STREAM_AUG, i), config.augment_fraction, config.gamma_range)
        if gamma is not None:
            img = gamma_darken(img, gamma)
        pos, neg, state = sample_contrastive_pair(bank, state)
        ins.append(img)
        labs.append(torch.from_numpy(lab))
        poss.append(resize(_image(pos), size, size))
        if neg is not None:
            negs.append(resize(_image(neg), size, size))
        gammas.append(gamma)
        refs.append({"input": rec.image.name, "positive": pos.name, "negative": neg.name if neg else None})
    return TrainBatch(
        inputs=torch.stack(ins),
        labels=torch.stack(labs),
        positives=torch.stack(poss),
        negatives=torch.stack(negs) if negs else None,
        gammas=gammas,
        refs=refs,
    )
