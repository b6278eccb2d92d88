"""Synthetic 7-class pattern images for desk-scale experiments.

Each class is a distinct geometric motif (stripes in three orientations, disc,
cross, checkerboard, frame) with per-sample jitter, so a small network can
separate them quickly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import ClassLabel, DatasetManifest


def pattern_image(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = size / 4
    phase = rng.uniform(0, period)
    if cls == 0:
        mask = ((yy + phase) % period) < period / 2
    elif cls == 1:
        mask = ((xx + phase) % period) < period / 2
    elif cls == 2:
        mask = ((xx + yy + phase) % period) < period / 2
    elif cls == 3:
        cy, cx = size / 2 + rng.uniform(-2, 2, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < (size * rng.uniform(0.25, 0.33)) ** 2
    elif cls == 4:
        c = size / 2 + rng.uniform(-2, 2)
        half = size * 0.08
        mask = (np.abs(yy - c) < half) | (np.abs(xx - c) < half)
    elif cls == 5:
        cell = size / 4
        mask = ((yy // cell + xx // cell + int(rng.integers(0, 2))) % 2) == 0
    elif cls == 6:
        b = int(rng.integers(2, 5))
        mask = (yy < b) | (yy >= size - b) | (xx < b) | (xx >= size - b)
    else:
        raise ValueError(f"no pattern for class {cls}")
    img = np.where(mask, rng.uniform(200, 250), rng.uniform(10, 50))
    img = img + rng.normal(0, 8, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_pattern_arrays(n_per_class: int = 5, size: int = 32, seed: int = 0):
    """Return (uint8 images [N, size, size], labels [N]) in class-major order."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(len(ClassLabel)):
        for _ in range(n_per_class):
            images.append(pattern_image(cls, size, rng))
            labels.append(cls)
    return np.stack(images), np.array(labels, dtype=np.int64)


def make_pattern_dataset(root, n_per_class: int = 5, size: int = 32, seed: int = 0) -> Path:
    """Write PNG images plus ``manifest.csv`` under ``root``; return the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, labels = make_pattern_arrays(n_per_class, size, seed)
    entries = []
    for i, (img, lbl) in enumerate(zip(images, labels)):
        rel = f"images/{ClassLabel(lbl).name.lower()}_{i:03d}.png"
        Image.fromarray(img).save(root / rel)
        entries.append((rel, ClassLabel(lbl)))
    path = root / "manifest.csv"
    path.write_text(DatasetManifest(entries, root).to_csv(), encoding="utf-8")
    return path
