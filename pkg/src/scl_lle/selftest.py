"""Self-test: gradient check plus a micro-suite of invariants."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch

from . import archive
from .enhancer import apply_curves, init_params, load_params, save_params
from .features import ReferenceBackend, gram_matrix
from .gradcheck import GradCheckConfig, gradient_check
from .imageio import gamma_darken, histogram
from .losses import LossConfig, total_loss
from .segmenter import TinyCNNSegBackend, one_hot


def _curve_closure(rng):
    x = torch.from_numpy(rng.random(10_000))
    a = torch.from_numpy(rng.uniform(-1, 1, 10_000))
    y = x + a * (x * (1 - x))
    return bool((y >= 0).all() and (y <= 1).all())


def _curve_monotone(rng):
    a = torch.from_numpy(rng.uniform(-1, 1, (200, 1)))
    x = torch.linspace(0, 1, 101, dtype=torch.float64)[None]
    y = x + a * (x * (1 - x))
    return bool((y[:, 1:] >= y[:, :-1]).all())


def _curve_identity(rng):
    img = torch.from_numpy(rng.random((3, 8, 8)))
    same = torch.equal(apply_curves(img, torch.zeros(4, 3, 8, 8, dtype=torch.float64)), img)
    ends = torch.tensor([0.0, 1.0], dtype=torch.float64).repeat(3, 4, 1).reshape(3, 4, 2)
    curves = torch.from_numpy(rng.uniform(-1, 1, (4, 3, 4, 2)))
    return same and torch.equal(apply_curves(ends, curves), ends)


def _gram(rng):
    f = torch.from_numpy(rng.normal(size=(6, 5, 5)))
    g = gram_matrix(f)
    v = torch.from_numpy(rng.normal(size=(100, 6)))
    return torch.equal(g, g.T) and bool((torch.einsum("ni,ij,nj->n", v, g, v) >= -1e-9).all())


def _probmap(rng):
    seg = TinyCNNSegBackend(4, seed=1)
    p = seg(torch.from_numpy(rng.random((3, 8, 8))))
    labels = rng.integers(0, 4, (8, 8))
    labels[0, 0] = 255
    oh, mask = one_hot(labels, 4)
    return bool(((p.sum(0) - 1).abs() < 1e-5).all() and ((oh.sum(0) - 1).abs() < 1e-6).all() and not mask[0, 0])


def _gamma(rng):
    img = torch.from_numpy(rng.random((3, 8, 8)))
    d2, d6 = gamma_darken(img, 2.0), gamma_darken(img, 6.0)
    return torch.equal(gamma_darken(img, 1.0), img) and bool((d2 <= img).all() and (d6 <= d2).all())


def _histogram(rng):
    img = torch.from_numpy(rng.random((3, 4, 4))).float()
    return bool((histogram(img).bins.sum(axis=1) == 16).all())


def _checkpoint(rng):
    with tempfile.TemporaryDirectory() as d:
        a, b = Path(d) / "a.ckpt", Path(d) / "b.ckpt"
        p = init_params(int(rng.integers(1000)), width=4, iterations=2)
        save_params(a, p)
        save_params(b, load_params(a))
        return a.read_bytes() == b.read_bytes()


def _loss_zero(rng):
    gray = torch.full((3, 8, 8), 0.5, dtype=torch.float64)
    labels = np.zeros((8, 8), dtype=np.int64)
    probs, _ = one_hot(labels, 2, dtype=torch.float64)
    rep = total_loss(gray, gray, gray, torch.zeros_like(gray), labels, probs,
                     torch.zeros(2, 3, 8, 8, dtype=torch.float64),
                     LossConfig(), ReferenceBackend(0, gain=4.0))
    # gain 4 puts the black negative beyond the Gram margin; every term vanishes
    return abs(float(rep.total)) < 1e-9


INVARIANTS = {
    "curve_closure": _curve_closure,
    "curve_monotonicity": _curve_monotone,
    "curve_identity_and_fixed_points": _curve_identity,
    "gram_symmetric_psd": _gram,
    "probmap_normalized": _probmap,
    "gamma_darkening": _gamma,
    "histogram_counts": _histogram,
    "checkpoint_roundtrip": _checkpoint,
    "loss_zero_case": _loss_zero,
}


def run_selftest(seed: int = 0, check_params: bool = True) -> dict:
    rng = np.random.default_rng(seed)
    invariants = {}
    for name, fn in INVARIANTS.items():
        try:
            invariants[name] = bool(fn(rng))
        except Exception as exc:  # report, don't crash the suite
            invariants[name] = False
            invariants[name + ".error"] = repr(exc)
    grad = gradient_check(GradCheckConfig(seed=seed, check_params=check_params))
    passed = grad["passed"] and all(v for k, v in invariants.items() if not k.endswith(".error"))
    return {"gradient_check": grad, "invariants": invariants, "passed": passed}


def check_archive(path) -> None:
    """Raise ``archive.ArchiveError`` (with byte offset) if ``path`` is malformed."""
    archive.load(path)
