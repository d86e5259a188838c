"""Small synthetic street-scene corpus in the dataset layout, for smoke runs.

Scenes are three horizontal bands (sky / building / road style classes 0, 1,
2) with per-image band colours, a soft vertical shading ramp and light noise.
Inputs are gamma-darkened scenes; underexposed negatives are darkened harder
than the inputs and overexposed negatives are brightened.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .imageio import save_image, save_label

__all__ = ["synthetic_scene", "make_synthetic_corpus", "smooth_texture"]

_BASE_COLORS = np.array([
    [0.62, 0.70, 0.82],  # sky
    [0.58, 0.52, 0.48],  # building
    [0.45, 0.45, 0.47],  # road
])


def synthetic_scene(rng: np.random.Generator, size: int = 32, num_classes: int = 3,
                    noise: float = 0.01, shading: float = 0.06) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image (3, H, W) in [0, 1], labels (H, W))``."""
    cuts = np.sort(rng.choice(np.arange(size // 5, size - size // 5), size=num_classes - 1, replace=False))
    rows = np.arange(size)
    labels_col = np.searchsorted(cuts, rows, side="right")
    labels = np.repeat(labels_col[:, None], size, axis=1).astype(np.int64)
    colors = np.empty((num_classes, 3))
    for c in range(num_classes):
        base = _BASE_COLORS[c % len(_BASE_COLORS)]
        colors[c] = np.clip(base + rng.uniform(-0.05, 0.05, 3), 0.05, 0.95)
    img = colors[labels].transpose(2, 0, 1)
    ramp = 1.0 + shading * (np.linspace(-1, 1, size)[None, None, :])
    img = img * ramp + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0), labels


def smooth_texture(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Grayscale multi-octave value noise in [0, 1], ``(size, size)``."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0, cells, size, endpoint=False)
        i0 = coords.astype(int)
        t = coords - i0
        t = t * t * (3 - 2 * t)
        top = grid[i0][:, i0] * (1 - t)[None, :] + grid[i0][:, i0 + 1] * t[None, :]
        bot = grid[i0 + 1][:, i0] * (1 - t)[None, :] + grid[i0 + 1][:, i0 + 1] * t[None, :]
        out += amp * (top * (1 - t)[:, None] + bot * t[:, None])
        total += amp
        amp *= 0.5
    return out / total


def make_synthetic_corpus(root, n_inputs: int = 8, n_pos: int = 4, n_over: int = 2, n_under: int = 2,
                          size: int = 32, seed: int = 0, num_classes: int = 3,
                          input_gamma=(2.5, 3.5), under_gamma: float = 8.0, over_gamma: float = 0.25,
                          noise: float = 0.0, shading: float = 0.0) -> Path:
    root = Path(root)
    rng = np.random.default_rng(seed)

    def put(img: np.ndarray, path: Path) -> None:
        save_image(torch.from_numpy(np.clip(img, 0, 1)).float(), path)

    for i in range(n_inputs):
        img, lab = synthetic_scene(rng, size, num_classes, noise, shading)
        put(img ** rng.uniform(*input_gamma), root / "inputs" / f"scene_{i:03d}.png")
        save_label(lab, root / "labels" / f"scene_{i:03d}.png")
    for i in range(n_pos):
        img, _ = synthetic_scene(rng, size, num_classes, noise, shading)
        put(img, root / "positives" / f"pos_{i:03d}.png")
    for i in range(n_over):
        img, _ = synthetic_scene(rng, size, num_classes, noise, shading)
        put(img ** over_gamma, root / "negatives" / "over" / f"over_{i:03d}.png")
    for i in range(n_under):
        img, _ = synthetic_scene(rng, size, num_classes, noise, shading)
        put(img ** under_gamma, root / "negatives" / "under" / f"under_{i:03d}.png")
    return root
