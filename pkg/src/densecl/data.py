"""Datasets: decoded image folders and the synthetic shapes generator."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from densecl.errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class Dataset:
    images: list
    labels: Optional[np.ndarray] = None
    names: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.images[i] for i in idx],
                       None if self.labels is None else self.labels[idx],
                       [self.names[i] for i in idx] if self.names else [],
                       [], list(self.class_names))


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 2000
    image_size: int = 64
    n_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("n_images", "image_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.synth.{name} must be >= 1")
        if self.image_size < 8:
            raise ConfigError("data.synth.image_size must be >= 8")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _read_labels(path: Path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if len(row) < 2:
                raise DataError(f"{path}: expected 'filename,class' rows, got {row}")
            name, label = row[0].strip(), row[1].strip()
            if name.lower() in ("filename", "file", "name"):
                continue
            out[name] = label
    return out


def ingest_folder(data_dir) -> Dataset:
    """Decode every raster image in ``data_dir``, sorted by filename.

    Undecodable files are skipped with a warning and listed in ``skipped``.  An
    optional ``labels.csv`` (``filename,class``) makes the dataset labeled.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    images, names, skipped = [], [], []
    for p in files:
        try:
            images.append(load_image(p))
            names.append(p.name)
        except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
            skipped.append(p.name)
            warnings.warn(f"skipping undecodable image {p.name}: {exc}", stacklevel=2)
    if not images:
        raise DataError(f"no decodable images in {root}")
    log.info("ingested %d images from %s (%d skipped)", len(images), root, len(skipped))
    ds = Dataset(images, names=names, skipped=skipped)
    labels_path = root / "labels.csv"
    if labels_path.exists():
        table = _read_labels(labels_path)
        missing = [n for n in names if n not in table]
        if missing:
            raise DataError(f"labels.csv has no entry for {missing[:5]}")
        ds.class_names = sorted(set(table[n] for n in names))
        ids = {c: i for i, c in enumerate(ds.class_names)}
        ds.labels = np.array([ids[table[n]] for n in names], dtype=np.int64)
    return ds


# ---------------------------------------------------------------------------
# synthetic generator

_SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")
_SHAPES_PER_CLASS = 5


@dataclass(frozen=True)
class _ShapeTemplate:
    kind: str
    color: tuple
    cx: float
    cy: float
    radius: float


def _class_templates(n_classes: int, seed: int) -> list:
    rng = np.random.default_rng([seed, 0xC1A55])
    templates = []
    for _ in range(n_classes):
        shapes = []
        for _ in range(_SHAPES_PER_CLASS):
            shapes.append(_ShapeTemplate(
                kind=_SHAPES[rng.integers(len(_SHAPES))],
                color=tuple(rng.uniform(0.05, 0.95, size=3)),
                cx=rng.uniform(0.15, 0.85),
                cy=rng.uniform(0.15, 0.85),
                radius=rng.uniform(0.08, 0.16),
            ))
        templates.append(shapes)
    return templates


def _shape_mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (ax <= r * 0.85) & (ay <= r * 0.85)
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = 0.35 * r
        return ((ax <= w) & (ay <= r)) | ((ay <= w) & (ax <= r))
    if kind == "diamond":
        return ax + ay <= r
    # triangle, apex up
    return (dy <= 0.7 * r) & (dy >= -r + 2.0 * ax)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random color field plus oriented stripes and grain."""
    coarse = rng.uniform(0.2, 0.8, size=(5, 5, 3))
    t = np.linspace(0, 4, size)
    i0 = np.minimum(t.astype(int), 3)
    f = (t - i0)[:, None]
    rows = coarse[i0] * (1 - f[..., None]) + coarse[i0 + 1] * f[..., None]
    field_ = rows[:, i0] * (1 - f.T[..., None]) + rows[:, i0 + 1] * f.T[..., None]
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3, 7)
    stripes = 0.08 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    grain = rng.normal(0, 0.03, size=(size, size, 1))
    return field_ + stripes[..., None] + grain


def generate_synthetic(spec: SynthSpec = SynthSpec(), offset: int = 0,
                       count: Optional[int] = None) -> Dataset:
    """Deterministic labeled images of class-specific colored shape layouts.

    Each class owns a layout of five shapes (kind, color, position, size); each
    image jitters that layout and draws it over its own textured background.
    ``offset``/``count`` select image indices ``[offset, offset + count)`` of the
    same stream, e.g. a held-out split drawn past ``spec.n_images``.
    """
    size = spec.image_size
    templates = _class_templates(spec.n_classes, spec.seed)
    count = spec.n_images if count is None else count
    index = np.arange(offset, offset + count)
    labels = index % spec.n_classes
    images = []
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    for i, label in zip(index, labels):
        rng = np.random.default_rng([spec.seed, int(i)])
        img = _background(rng, size)
        for shape in templates[label]:
            cx = shape.cx + rng.normal(0, 0.05)
            cy = shape.cy + rng.normal(0, 0.05)
            r = shape.radius * rng.uniform(0.8, 1.2)
            color = np.clip(np.asarray(shape.color) + rng.normal(0, 0.06, size=3), 0, 1)
            mask = _shape_mask(shape.kind, xx - cx, yy - cy, r)
            img[mask] = color
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    names = [f"synth_{i:05d}" for i in index]
    return Dataset(images, labels, names, [], [f"class_{c}" for c in range(spec.n_classes)])
