"""Tiling, Otsu background filtering and per-tile featurisation of image pyramids.

A raster pyramid is a mapping ``{"thumbnail": img, "region": img, "patch": img}``
where every image is a 2-D grayscale or 3-D RGB ``numpy`` array.  The patch
level is the 2x magnification of the region level, so its tile grid is exactly
twice the region grid in each direction.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
from PIL import Image

from .config import SynthSpec

LEVELS = ("thumbnail", "region", "patch")
LEVEL_INDEX = {name: i for i, name in enumerate(LEVELS)}
DEFAULT_PATCH_SIZE = 512
FOREGROUND_FRAC = 0.25


class EmptySlideError(ValueError):
    """Raised when background filtering leaves no region tiles."""


class FeatureExtractionError(RuntimeError):
    pass


@dataclass
class TileRecord:
    level: str
    row: int
    col: int
    slide_id: str = ""
    feature: np.ndarray | None = field(default=None, repr=False, compare=False)
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class TileGrid:
    level: str
    height: int
    width: int
    present: np.ndarray
    tiles: list[TileRecord]

    def __post_init__(self):
        if self.present.shape != (self.height, self.width):
            raise ValueError(f"present mask {self.present.shape} != grid {(self.height, self.width)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def check(self) -> None:
        positions = {(t.row, t.col) for t in self.tiles}
        if len(positions) != len(self.tiles):
            raise ValueError(f"{self.level}: duplicate tile positions")
        expected = {tuple(map(int, rc)) for rc in np.argwhere(self.present)}
        if positions != expected:
            raise ValueError(f"{self.level}: tiles do not match the present mask")


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3 and image.shape[2] in (3, 4):
        rgb = image[..., :3].astype(np.float64)
        return rgb @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"expected a 2-D gray or HxWx3 image, got shape {image.shape}")


def _resize(gray: np.ndarray, rows: int, cols: int) -> np.ndarray:
    if gray.shape == (rows, cols):
        return gray.astype(np.float32)
    img = Image.fromarray(np.ascontiguousarray(gray, dtype=np.float32), mode="F")
    return np.asarray(img.resize((cols, rows), Image.Resampling.BOX), dtype=np.float32)


# --------------------------------------------------------------------------- tiling

def tile_level(image: np.ndarray, patch_size: int, level: str, slide_id: str = "",
               grid_shape: tuple[int, int] | None = None) -> TileGrid:
    """Cut one level into non-overlapping windows, zero-padding at the border."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    image = np.asarray(image)
    if image.ndim < 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"{level}: image must be at least 1x1 pixels, got shape {image.shape}")
    rows = math.ceil(image.shape[0] / patch_size)
    cols = math.ceil(image.shape[1] / patch_size)
    if grid_shape is not None:
        if rows > grid_shape[0] or cols > grid_shape[1]:
            raise ValueError(f"{level}: image needs a {rows}x{cols} grid, larger than {grid_shape}")
        rows, cols = grid_shape
    padded = np.zeros((rows * patch_size, cols * patch_size) + image.shape[2:], dtype=image.dtype)
    padded[: image.shape[0], : image.shape[1]] = image
    tiles = []
    for r in range(rows):
        for c in range(cols):
            window = padded[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
            tiles.append(TileRecord(level, r, c, slide_id, pixels=window))
    return TileGrid(level, rows, cols, np.ones((rows, cols), dtype=bool), tiles)


def tile_pyramid(raster: Mapping[str, np.ndarray], patch_size: int = DEFAULT_PATCH_SIZE,
                 slide_id: str = "") -> dict[str, TileGrid]:
    unknown = set(raster) - set(LEVELS)
    if unknown:
        raise ValueError(f"unknown pyramid levels {sorted(unknown)}")
    grids: dict[str, TileGrid] = {}
    if "region" in raster:
        grids["region"] = tile_level(raster["region"], patch_size, "region", slide_id)
    if "patch" in raster:
        shape = None
        if "region" in grids:
            shape = (2 * grids["region"].height, 2 * grids["region"].width)
        grids["patch"] = tile_level(raster["patch"], patch_size, "patch", slide_id, shape)
    if "thumbnail" in raster:
        thumb = np.asarray(raster["thumbnail"])
        if thumb.ndim < 2 or thumb.shape[0] < 1 or thumb.shape[1] < 1:
            raise ValueError("thumbnail must be at least 1x1 pixels")
        pixels = _resize(to_gray(thumb), patch_size, patch_size)
        grids["thumbnail"] = TileGrid("thumbnail", 1, 1, np.ones((1, 1), dtype=bool),
                                      [TileRecord("thumbnail", 0, 0, slide_id, pixels=pixels)])
    return grids


# --------------------------------------------------------------------------- Otsu

def otsu_threshold(gray: np.ndarray) -> float | None:
    """Gray value t maximising between-class variance of ``{<= t}`` vs ``{> t}``.

    Returns ``None`` for a constant image.  Ties resolve to the smallest cut.
    """
    values, counts = np.unique(np.asarray(gray, dtype=np.float64).ravel(), return_counts=True)
    if len(values) < 2:
        return None
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1] / total
    w1 = 1.0 - w0
    csum = np.cumsum(counts * values)
    mu0 = csum[:-1] / np.cumsum(counts)[:-1]
    mu1 = (csum[-1] - csum[:-1]) / (total - np.cumsum(counts)[:-1])
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(values[int(np.argmax(between))])


def _cell_edges(n_pixels: int, n_cells: int) -> np.ndarray:
    return np.floor(np.linspace(0, n_pixels, n_cells + 1)).astype(int)


def otsu_mask(thumbnail: np.ndarray, grid_shape: tuple[int, int],
              foreground_frac: float = FOREGROUND_FRAC) -> tuple[np.ndarray, float | None]:
    """Tissue mask over a ``grid_shape`` tiling of the thumbnail.

    A cell is foreground when more than ``foreground_frac`` of its pixels are
    at or below the Otsu threshold.  A constant thumbnail has no threshold: the
    mask is all background, the returned threshold is ``None`` and a
    ``RuntimeWarning`` is emitted.
    """
    gray = to_gray(thumbnail)
    rows, cols = grid_shape
    threshold = otsu_threshold(gray)
    if threshold is None:
        warnings.warn("constant thumbnail: no Otsu threshold, every tile treated as background",
                      RuntimeWarning, stacklevel=2)
        return np.zeros(grid_shape, dtype=bool), None
    # upsample tiny thumbnails so every cell owns at least one pixel
    up_r, up_c = math.ceil(rows / gray.shape[0]), math.ceil(cols / gray.shape[1])
    if up_r > 1 or up_c > 1:
        gray = np.repeat(np.repeat(gray, up_r, axis=0), up_c, axis=1)
    dark = gray <= threshold
    re, ce = _cell_edges(gray.shape[0], rows), _cell_edges(gray.shape[1], cols)
    mask = np.zeros(grid_shape, dtype=bool)
    for r in range(rows):
        for c in range(cols):
            cell = dark[re[r]:re[r + 1], ce[c]:ce[c + 1]]
            mask[r, c] = cell.mean() > foreground_frac
    return mask, threshold


def filter_background(grids: Mapping[str, TileGrid], mask: np.ndarray) -> dict[str, TileGrid]:
    """Drop masked-out region tiles and every patch tile whose parent was dropped."""
    region = grids["region"]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != region.shape:
        raise ValueError(f"mask shape {mask.shape} != region grid {region.shape}")
    keep_region = region.present & mask
    if not keep_region.any():
        raise EmptySlideError("every region tile was filtered out as background")
    out = dict(grids)
    out["region"] = dataclasses.replace(
        region, present=keep_region,
        tiles=[t for t in region.tiles if keep_region[t.row, t.col]])
    if "patch" in grids:
        patch = grids["patch"]
        parent_keep = np.repeat(np.repeat(keep_region, 2, axis=0), 2, axis=1)
        parent_keep = parent_keep[: patch.height, : patch.width]
        keep_patch = patch.present & parent_keep
        out["patch"] = dataclasses.replace(
            patch, present=keep_patch,
            tiles=[t for t in patch.tiles if keep_patch[t.row, t.col]])
    return out


# --------------------------------------------------------------------------- features

class FeatureExtractor(Protocol):
    name: str
    output_dim: int

    def __call__(self, pixels: np.ndarray) -> np.ndarray: ...


class RandomProjectionExtractor:
    """Fixed-seed Gaussian projection of a downsampled grayscale tile."""

    def __init__(self, output_dim: int, seed: int = 0, side: int = 32):
        self.name = f"randproj-{side}-s{seed}"
        self.output_dim = output_dim
        self.seed = seed
        self.side = side
        rng = np.random.default_rng(seed)
        self.projection = (rng.standard_normal((side * side, output_dim))
                           / np.sqrt(side * side)).astype(np.float32)

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        small = _resize(to_gray(pixels) / 255.0, self.side, self.side)
        return small.reshape(-1) @ self.projection


def extract_features(grids: Mapping[str, TileGrid], extractor: FeatureExtractor,
                     feature_dim: int | None = None) -> dict[str, TileGrid]:
    if feature_dim is not None and extractor.output_dim != feature_dim:
        raise ValueError(f"extractor {extractor.name} emits {extractor.output_dim} dims, "
                         f"config expects feature_dim={feature_dim}")
    out = {}
    for level, grid in grids.items():
        tiles = []
        for t in grid.tiles:
            try:
                vec = np.asarray(extractor(t.pixels), dtype=np.float32).reshape(-1)
            except Exception as exc:
                raise FeatureExtractionError(
                    f"extractor {extractor.name} failed on {level} tile ({t.row}, {t.col}): {exc}"
                ) from exc
            if vec.shape != (extractor.output_dim,):
                raise FeatureExtractionError(
                    f"{level} tile ({t.row}, {t.col}): got {vec.shape[0]} dims, "
                    f"expected {extractor.output_dim}")
            if not np.isfinite(vec).all():
                raise FeatureExtractionError(f"non-finite feature at {level} tile ({t.row}, {t.col})")
            tiles.append(dataclasses.replace(t, feature=vec))
        out[level] = dataclasses.replace(grid, tiles=tiles)
    return out


def attach_features(grids: Mapping[str, TileGrid], table: Mapping[tuple[str, int, int], np.ndarray],
                    feature_dim: int) -> dict[str, TileGrid]:
    """Populate tiles from a precomputed ``(level, row, col) -> vector`` table."""
    out = {}
    for level, grid in grids.items():
        tiles = []
        for t in grid.tiles:
            key = (level, t.row, t.col)
            if key not in table:
                raise FeatureExtractionError(f"no precomputed feature for {level} tile ({t.row}, {t.col})")
            vec = np.asarray(table[key], dtype=np.float32).reshape(-1)
            if vec.shape[0] != feature_dim:
                raise ValueError(f"precomputed feature for {level} tile ({t.row}, {t.col}) has "
                                 f"{vec.shape[0]} dims, expected {feature_dim}")
            if not np.isfinite(vec).all():
                raise FeatureExtractionError(f"non-finite feature at {level} tile ({t.row}, {t.col})")
            tiles.append(dataclasses.replace(t, feature=vec))
        out[level] = dataclasses.replace(grid, tiles=tiles)
    return out


# --------------------------------------------------------------------------- synthetic data

def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def synth_slide(seed: int, spec: SynthSpec | None = None) -> tuple[dict[str, np.ndarray], int]:
    """Deterministic synthetic pyramid whose label is ``seed % num_classes``.

    The class is planted at two scales with amplitude proportional to
    ``signal_strength``: a low-frequency shading pattern spanning each tissue
    region tile, and fine oriented stripes in a random subset of patch tiles.
    The patch level is drawn first; region and thumbnail are 2x and 4x box
    downsamples of it.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    label = seed % spec.num_classes
    ps, rr, rc = spec.patch_size, spec.region_rows, spec.region_cols
    side = 2 * ps  # a region tile spans 2x2 patch tiles at patch magnification

    tissue = rng.random((rr, rc)) < spec.tissue_prob
    if tissue.sum() < 2:
        extra = rng.choice(rr * rc, size=min(2, rr * rc), replace=False)
        tissue.flat[extra] = True

    theta = np.pi * label / max(spec.num_classes, 1)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    shading = np.cos(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / side)
    py, px = np.mgrid[0:ps, 0:ps].astype(np.float64)
    phi = theta + np.pi / 2
    stripes = np.sign(np.sin(2 * np.pi * (px * np.cos(phi) + py * np.sin(phi)) / 6.0))

    canvas = np.full((rr * side, rc * side), 235.0)
    s = spec.signal_strength
    for r in range(rr):
        for c in range(rc):
            if not tissue[r, c]:
                continue
            block = 140.0 + rng.normal(0, 12.0) + 25.0 * s * shading
            for qr in range(2):
                for qc in range(2):
                    if rng.random() < spec.texture_prob:
                        block[qr * ps:(qr + 1) * ps, qc * ps:(qc + 1) * ps] += 35.0 * s * stripes
            canvas[r * side:(r + 1) * side, c * side:(c + 1) * side] = block
    canvas += rng.normal(0.0, spec.noise * 255.0, canvas.shape)
    patch = np.clip(canvas, 0, 255)
    region = _downsample2(patch)
    thumbnail = _downsample2(region)
    to_u8 = lambda a: np.round(a).astype(np.uint8)  # noqa: E731
    return {"thumbnail": to_u8(thumbnail), "region": to_u8(region), "patch": to_u8(patch)}, label


def ingest_slide(raster: Mapping[str, np.ndarray], extractor: FeatureExtractor,
                 patch_size: int = DEFAULT_PATCH_SIZE, slide_id: str = "",
                 foreground_frac: float = FOREGROUND_FRAC) -> dict[str, TileGrid]:
    """tile -> Otsu mask on the thumbnail -> filter -> featurise."""
    grids = tile_pyramid(raster, patch_size, slide_id)
    mask, _ = otsu_mask(raster["thumbnail"], grids["region"].shape, foreground_frac)
    grids = filter_background(grids, mask)
    return extract_features(grids, extractor)


# --------------------------------------------------------------------------- raster io

def load_raster_dir(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``level_{0,1,2}.png`` (thumbnail, region, patch) from a slide directory."""
    path = Path(path)
    raster = {}
    for i, level in enumerate(LEVELS):
        candidates = [path / f"level_{i}.{ext}" for ext in ("png", "tif", "tiff")]
        found = next((p for p in candidates if p.exists()), None)
        if found is None:
            raise FileNotFoundError(f"{path}: missing level_{i} image")
        with Image.open(found) as img:
            raster[level] = np.asarray(img.convert("L") if img.mode not in ("L", "RGB") else img)
    return raster


def save_raster_dir(raster: Mapping[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, level in enumerate(LEVELS):
        Image.fromarray(np.asarray(raster[level], dtype=np.uint8)).save(path / f"level_{i}.png")
