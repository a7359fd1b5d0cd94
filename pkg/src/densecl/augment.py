"""Two-view augmentation with recorded crop/flip geometry.

Pixel coordinates are continuous with half-pixel centers: pixel ``i`` spans
``[i, i+1)`` and its center sits at ``i + 0.5``.  A view of side ``out`` built
from crop ``(x, y, w, h)`` maps view coordinate ``u`` to source coordinate
``x + u * w / out`` (after undoing the flip, ``u -> out - u``).  The geometry is
used by evaluation only; training never sees it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Hashable

import numpy as np
from scipy.ndimage import gaussian_filter

from densecl.errors import ConfigError, ShapeError

MIN_SIDE = 8
_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class ViewGeometry:
    crop_x: int
    crop_y: int
    crop_w: int
    crop_h: int
    flipped: bool
    out_size: int

    def __post_init__(self):
        if self.crop_w < 1 or self.crop_h < 1 or self.out_size < 1:
            raise ShapeError(f"degenerate view geometry {self}")

    def view_to_source(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if self.flipped:
            u = self.out_size - u
        return (self.crop_x + u * self.crop_w / self.out_size,
                self.crop_y + v * self.crop_h / self.out_size)

    def source_to_view(self, x, y):
        u = (np.asarray(x, dtype=np.float64) - self.crop_x) * self.out_size / self.crop_w
        v = (np.asarray(y, dtype=np.float64) - self.crop_y) * self.out_size / self.crop_h
        if self.flipped:
            u = self.out_size - u
        return u, v


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    geom_a: ViewGeometry
    geom_b: ViewGeometry
    source_id: Hashable = None


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation magnitudes. Defaults follow the MoCo-v2 convention."""

    out_size: int = 64
    scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    photometric: bool = True

    def __post_init__(self):
        lo, hi = self.scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"augment.scale must satisfy 0 < min <= max <= 1, got {self.scale}")
        if self.out_size < 1:
            raise ConfigError(f"augment.out_size must be >= 1, got {self.out_size}")
        for name in ("flip_prob", "jitter_prob", "gray_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1]")
        if not 0.0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigError(
                f"augment.blur_sigma must satisfy 0 < min <= max, got {self.blur_sigma}")

    @classmethod
    def disabled(cls, out_size: int = 64) -> "AugmentConfig":
        return cls(out_size=out_size, scale=(1.0, 1.0), flip_prob=0.0, jitter_prob=0.0,
                   gray_prob=0.0, blur_prob=0.0, photometric=False)

    def geometric_only(self) -> "AugmentConfig":
        return replace(self, photometric=False)


def _interp_matrix(start: float, length: float, out: int, n_src: int) -> np.ndarray:
    """Row ``i`` holds bilinear weights sampling source at ``start + (i+.5)*length/out``."""
    centers = start + (np.arange(out) + 0.5) * (length / out) - 0.5
    centers = np.clip(centers, 0.0, n_src - 1)
    i0 = np.floor(centers).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = centers - i0
    m = np.zeros((out, n_src), dtype=np.float64)
    rows = np.arange(out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def crop_resize(image: np.ndarray, x: int, y: int, w: int, h: int, out: int) -> np.ndarray:
    """Bilinear resample of the box ``(x, y, w, h)`` to ``out x out``."""
    H, W = image.shape[:2]
    ry = _interp_matrix(y, h, out, H)
    rx = _interp_matrix(x, w, out, W)
    res = np.einsum("ih,hwc,jw->ijc", ry, image.astype(np.float64, copy=False), rx,
                    optimize=True)
    return res.astype(np.float32)


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {image.shape}")
    if min(image.shape[:2]) < MIN_SIDE:
        raise ShapeError(f"image is too small: {image.shape[:2]}, need min side >= {MIN_SIDE}")


def geometric_augment(image: np.ndarray, rng: np.random.Generator,
                      cfg: AugmentConfig) -> tuple[np.ndarray, ViewGeometry]:
    """Random square resized crop plus horizontal flip."""
    _check_image(image)
    H, W = image.shape[:2]
    # fixed draw count per call keeps RNG streams aligned across configs
    scale = rng.uniform(*cfg.scale)
    u_x, u_y, u_flip = rng.random(3)
    side = int(round(math.sqrt(scale * H * W)))
    side = min(max(side, 1), H, W)
    x = min(int(u_x * (W - side + 1)), W - side)
    y = min(int(u_y * (H - side + 1)), H - side)
    flipped = bool(u_flip < cfg.flip_prob)
    geom = ViewGeometry(x, y, side, side, flipped, cfg.out_size)
    return render_view(image, geom), geom


def render_view(image: np.ndarray, geom: ViewGeometry) -> np.ndarray:
    view = crop_resize(image, geom.crop_x, geom.crop_y, geom.crop_w, geom.crop_h, geom.out_size)
    if geom.flipped:
        view = np.ascontiguousarray(view[:, ::-1])
    return view


def grayscale(img: np.ndarray) -> np.ndarray:
    g = img.astype(np.float64) @ _GRAY
    return np.repeat(g[..., None], 3, axis=2).astype(img.dtype)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="reflect", truncate=4.0)


def photometric_augment(view: np.ndarray, rng: np.random.Generator,
                        cfg: AugmentConfig) -> np.ndarray:
    """Color jitter, random grayscale and Gaussian blur; pixel positions are untouched."""
    u = rng.random(3)
    b, c, s = rng.uniform(-1.0, 1.0, size=3)
    sigma = rng.uniform(*cfg.blur_sigma)
    if not cfg.photometric:
        return view
    out = view
    if u[0] < cfg.jitter_prob:
        out = out.astype(np.float64)
        out = np.clip(out * (1.0 + b * cfg.brightness), 0.0, 1.0)
        mean = (out @ _GRAY).mean()
        out = np.clip((out - mean) * (1.0 + c * cfg.contrast) + mean, 0.0, 1.0)
        gray = (out @ _GRAY)[..., None]
        out = np.clip((out - gray) * (1.0 + s * cfg.saturation) + gray, 0.0, 1.0)
        out = out.astype(np.float32)
    if u[1] < cfg.gray_prob:
        out = grayscale(out)
    if u[2] < cfg.blur_prob:
        out = np.clip(gaussian_blur(out, sigma), 0.0, 1.0)
    return out


def make_view_pair(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
                   source_id: Hashable = None) -> ViewPair:
    rng_a, rng_b = rng.spawn(2)
    view_a, geom_a = geometric_augment(image, rng_a, cfg)
    view_b, geom_b = geometric_augment(image, rng_b, cfg)
    view_a = photometric_augment(view_a, rng_a, cfg)
    view_b = photometric_augment(view_b, rng_b, cfg)
    return ViewPair(view_a, view_b, geom_a, geom_b, source_id)


def pair_rng(seed: int, *keys: int) -> np.random.Generator:
    """RNG substream for one view pair, e.g. ``pair_rng(seed, epoch, source_index)``."""
    return np.random.default_rng([seed, *keys])


def cell_centers(S: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """View-pixel coordinates (u, v) of the S*S grid-cell centers, row-major."""
    c = (np.arange(S) + 0.5) * out_size / S
    v, u = np.meshgrid(c, c, indexing="ij")
    return u.ravel(), v.ravel()


def ground_truth_correspondence(geom_a: ViewGeometry, geom_b: ViewGeometry,
                                S: int) -> tuple[np.ndarray, np.ndarray]:
    """Map every grid cell of view A to the nearest grid cell of view B.

    Returns ``(mapping, valid)``; ``mapping[i] == -1`` where the cell center of A
    falls outside view B.  Exact ties between two cells resolve to the lower index.
    """
    u, v = cell_centers(S, geom_a.out_size)
    x, y = geom_a.view_to_source(u, v)
    ub, vb = geom_b.source_to_view(x, y)
    out = geom_b.out_size
    valid = (ub >= 0) & (ub < out) & (vb >= 0) & (vb < out)
    # nearest cell center, half-way ties going down
    col = np.clip(np.ceil(ub * S / out - 1.0), 0, S - 1).astype(np.int64)
    row = np.clip(np.ceil(vb * S / out - 1.0), 0, S - 1).astype(np.int64)
    mapping = np.where(valid, row * S + col, -1)
    return mapping, valid
