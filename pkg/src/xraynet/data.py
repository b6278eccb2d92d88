"""Dataset manifests, preprocessing, augmentation and fold planning."""
from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ClassTooSmall, EmptyImage, ParseError, UnknownLabel

CANVAS = (200, 200)
CONTRAST_THRESHOLD = 32 / 255


class ClassLabel(enum.IntEnum):
    Covid19 = 0
    Edema = 1
    Effusion = 2
    Copd = 3
    Fibrosis = 4
    Pneumonia = 5
    Normal = 6

    @property
    def display(self) -> str:
        """Name used in published-style tables (COPD appears as "Emphys.")."""
        return "Emphys." if self is ClassLabel.Copd else self.name

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            return cls[text]
        except KeyError:
            raise UnknownLabel(f"unknown label {text!r}; expected one of {', '.join(c.name for c in cls)}") from None


CLASS_NAMES = tuple(c.name for c in ClassLabel)
DISPLAY_NAMES = tuple(c.display for c in ClassLabel)


@dataclass
class DatasetManifest:
    entries: list  # (relative path, ClassLabel)
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(lbl) for _, lbl in self.entries], dtype=np.int64)

    @property
    def counts(self) -> dict:
        out = {c: 0 for c in ClassLabel}
        for _, lbl in self.entries:
            out[lbl] += 1
        return out

    def resolve(self, i: int) -> Path:
        return self.root / self.entries[i][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "label"])
        for p, lbl in self.entries:
            w.writerow([p, ClassLabel(lbl).name])
        return buf.getvalue()


def load_manifest(path) -> DatasetManifest:
    """Read a ``path,label`` CSV; image paths are relative to the manifest's directory."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None:
        raise ParseError("empty manifest", path, 1)
    if [h.strip() for h in header] != ["path", "label"]:
        raise ParseError(f"header must be 'path,label', got {','.join(header)!r}", path, 1)
    entries = []
    seen = set()
    for row in rows:
        line = rows.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, got {len(row)}", path, line)
        p, label = row[0].strip(), row[1].strip()
        if not p:
            raise ParseError("empty image path", path, line)
        if p in seen:
            raise ParseError(f"duplicate path {p!r}", path, line)
        try:
            lbl = ClassLabel.parse(label)
        except UnknownLabel as exc:
            raise UnknownLabel(str(exc), path, line) from None
        seen.add(p)
        entries.append((p, lbl))
    if not entries:
        raise ParseError("manifest has no entries", path, 2)
    return DatasetManifest(entries, path.parent)


# images


def read_image(path) -> np.ndarray:
    """Decode PNG/PGM (or anything Pillow reads) to 8-bit grayscale."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def _axis_coords(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (exact identity at scale 1)."""
    img = np.asarray(img, dtype=np.float64)
    y0, y1, ty = _axis_coords(img.shape[0], out_h)
    x0, x1, tx = _axis_coords(img.shape[1], out_w)
    rows = img[y0] * (1 - ty)[:, None] + img[y1] * ty[:, None]
    return rows[:, x0] * (1 - tx) + rows[:, x1] * tx


def letterbox_geometry(h: int, w: int, size=CANVAS):
    """Return (scaled_h, scaled_w, top, left) for an aspect-preserving fit."""
    s = min(size[0] / h, size[1] / w)
    nh = min(size[0], max(1, int(round(h * s))))
    nw = min(size[1], max(1, int(round(w * s))))
    return nh, nw, (size[0] - nh) // 2, (size[1] - nw) // 2


def preprocess(image: np.ndarray, size=CANVAS, channels: int = 1) -> np.ndarray:
    """Letterbox an 8-bit grayscale image onto a black canvas.

    Returns float32 [channels, H, W] with values in [0, 1]; padding is exactly 0.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        image = np.asarray(Image.fromarray(image.astype(np.uint8)).convert("L"))
    if image.ndim != 2 or image.size == 0:
        raise EmptyImage(f"expected a non-empty 2-D image, got shape {image.shape}")
    nh, nw, top, left = letterbox_geometry(*image.shape, size)
    scaled = resize_bilinear(image / 255.0, nh, nw)
    canvas = np.zeros((channels,) + tuple(size), dtype=np.float32)
    canvas[:, top : top + nh, left : left + nw] = np.clip(scaled, 0.0, 1.0)
    return canvas


def contrast_span(image: np.ndarray) -> float:
    lo, hi = np.percentile(np.asarray(image, dtype=np.float64), [2, 98])
    return (hi - lo) / 255.0


def check_contrast(image: np.ndarray, threshold: float = CONTRAST_THRESHOLD) -> bool:
    """True to keep the image; excluded only when the 2-98 percentile span is strictly below ``threshold``."""
    return not contrast_span(image) < threshold


# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_degrees: float = 10.0
    max_shift_pixels: int = 20
    enabled: bool = True

    def __post_init__(self):
        if self.max_rotation_degrees < 0 or self.max_shift_pixels < 0:
            raise ValueError("augmentation bounds must be non-negative")


@dataclass(frozen=True)
class AugmentDraw:
    angle: float
    shift_y: int
    shift_x: int


def draw_augmentation(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentDraw:
    r, s = cfg.max_rotation_degrees, int(cfg.max_shift_pixels)
    angle = float(rng.uniform(-r, r)) if r > 0 else 0.0
    dy, dx = (int(v) for v in rng.integers(-s, s, endpoint=True, size=2))
    return AugmentDraw(angle, dy, dx)


def _rotate(plane: np.ndarray, degrees: float) -> np.ndarray:
    h, w = plane.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: where each output pixel comes from
    sy = c * dy - s * dx + cy
    sx = s * dy + c * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    ty, tx = sy - y0, sx - x0
    out = np.zeros((h, w), dtype=np.float64)
    for oy, wy in ((0, 1 - ty), (1, ty)):
        for ox, wx in ((0, 1 - tx), (1, tx)):
            yi, xi = y0 + oy, x0 + ox
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            out[ok] += (wy * wx)[ok] * plane[yi[ok], xi[ok]]
    return out


def _shift(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = plane.shape
    out = np.zeros_like(plane)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = plane[
        max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)
    ]
    return out


def apply_augmentation(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Rotate about the centre, then shift; exposed regions are black."""
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        plane = _rotate(image[ch], draw.angle) if draw.angle else image[ch].astype(np.float64)
        out[ch] = np.clip(_shift(plane, draw.shift_y, draw.shift_x), 0.0, 1.0)
    return out


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.enabled:
        return image
    return apply_augmentation(image, draw_augmentation(cfg, rng))


# folds


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: np.ndarray

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def to_csv(self) -> str:
        lines = [f"# k={self.k} seed={self.seed}", "index,fold"]
        lines += [f"{i},{f}" for i, f in enumerate(self.assignment)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, path=None) -> "FoldPlan":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ParseError("missing '# k=.. seed=..' header", path, 1)
        try:
            meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
            k, seed = int(meta["k"]), int(meta["seed"])
        except (KeyError, ValueError):
            raise ParseError("malformed fold header", path, 1) from None
        if len(lines) < 2 or lines[1].strip() != "index,fold":
            raise ParseError("expected 'index,fold' column header", path, 2)
        assignment = []
        for n, line in enumerate(lines[2:], start=3):
            try:
                i, f = (int(v) for v in line.split(","))
            except ValueError:
                raise ParseError(f"bad row {line!r}", path, n) from None
            if i != len(assignment) or not 0 <= f < k:
                raise ParseError(f"bad row {line!r}", path, n)
            assignment.append(f)
        return cls(k, seed, np.array(assignment, dtype=np.int64))


def plan_folds(labels, k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified deterministic fold assignment.

    Each class's indices are shuffled with the seeded generator and dealt
    round-robin; the dealing position carries over between classes so fold
    totals also stay within one of each other.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.full(labels.shape[0], -1, dtype=np.int64)
    pos = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ClassTooSmall(f"class {c} has {idx.size} samples, fewer than k={k}")
        idx = rng.permutation(idx)
        assignment[idx] = (pos + np.arange(idx.size)) % k
        pos = (pos + idx.size) % k
    return FoldPlan(k, int(seed), assignment)


# in-memory image sets


@dataclass
class ImageSet:
    """Preprocessed single-channel images [N, 1, H, W] with labels."""

    images: np.ndarray
    labels: np.ndarray
    paths: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.labels[idx], [self.paths[i] for i in idx] if self.paths else [])


def load_image_set(
    manifest: DatasetManifest,
    size=CANVAS,
    contrast_threshold: Optional[float] = CONTRAST_THRESHOLD,
    workers: int = 1,
) -> ImageSet:
    """Decode, screen and letterbox every manifest image, in manifest order."""

    def load(i):
        img = read_image(manifest.resolve(i))
        if contrast_threshold is not None and not check_contrast(img, contrast_threshold):
            return None
        return preprocess(img, size, channels=1)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(load, range(len(manifest))))
    else:
        results = [load(i) for i in range(len(manifest))]
    keep = [i for i, r in enumerate(results) if r is not None]
    images = np.stack([results[i] for i in keep]) if keep else np.zeros((0, 1) + tuple(size), np.float32)
    return ImageSet(
        images,
        manifest.labels[keep],
        [manifest.entries[i][0] for i in keep],
        [manifest.entries[i][0] for i, r in enumerate(results) if r is None],
    )


class BatchLoader:
    """Mini-batch iterator.

    ``mode="train"`` shuffles and applies online augmentation with fresh
    draws every pass; ``mode="eval"`` keeps order and never augments.
    ``augmentations`` counts augmented samples so callers can assert that.
    """

    def __init__(self, images, labels, batch_size=32, channels=1, mode="eval", augment_cfg=None, rng=None):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.batch_size = int(batch_size)
        self.channels = channels
        self.mode = mode
        self.augment_cfg = augment_cfg or AugmentConfig(enabled=False)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.augmentations = 0

    def _batches(self, n) -> list[np.ndarray]:
        order = self.rng.permutation(n) if self.mode == "train" else np.arange(n)
        chunks = [order[i : i + self.batch_size] for i in range(0, n, self.batch_size)]
        # a lone trailing sample cannot be batch-normalized
        if self.mode == "train" and len(chunks) > 1 and len(chunks[-1]) == 1:
            tail = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], tail])
        return chunks

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for idx in self._batches(len(self.labels)):
            x = self.images[idx]
            if self.mode == "train" and self.augment_cfg.enabled:
                x = np.stack([augment(img, self.augment_cfg, self.rng) for img in x])
                self.augmentations += len(idx)
            if x.shape[1] != self.channels:
                x = np.repeat(x, self.channels, axis=1)
            yield np.ascontiguousarray(x, dtype=np.float32), self.labels[idx]

    def __len__(self):
        n = len(self.labels)
        count = -(-n // self.batch_size)
        if self.mode == "train" and count > 1 and n % self.batch_size == 1:
            count -= 1
        return count


__all__: Sequence[str] = [
    "ClassLabel",
    "DatasetManifest",
    "FoldPlan",
    "AugmentConfig",
    "ImageSet",
    "BatchLoader",
    "load_manifest",
    "read_image",
    "preprocess",
    "check_contrast",
    "augment",
    "plan_folds",
    "load_image_set",
]
