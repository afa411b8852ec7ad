"""Bi-temporal tile ingestion, raster tiling, augmentation and synthetic scenes."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import CoregistrationError, DataError, IngestionError, ShapeError

SPLITS = ("train", "val", "test")
IMAGE_EXTS = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")


@dataclass
class BiTemporalTile:
    """Images are float32 3xSxS in [0, 1]; mask is uint8 SxS in {0, 1} or None."""

    t1: np.ndarray
    t2: np.ndarray
    mask: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise CoregistrationError(
                f"{self.name or 'tile'}: T1 {self.t1.shape} vs T2 {self.t2.shape}"
            )
        if self.mask is not None and self.mask.shape != self.t1.shape[-2:]:
            raise CoregistrationError(
                f"{self.name or 'tile'}: mask {self.mask.shape} vs image {self.t1.shape[-2:]}"
            )


@dataclass
class ChannelStats:
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    @classmethod
    def from_tiles(cls, tiles: Sequence[BiTemporalTile]) -> "ChannelStats":
        """Per-channel statistics over both dates of every tile."""
        if not tiles:
            return cls()
        acc = np.zeros(3)
        acc2 = np.zeros(3)
        n = 0
        for t in tiles:
            for img in (t.t1, t.t2):
                x = img.reshape(3, -1).astype(np.float64)
                acc += x.sum(1)
                acc2 += (x * x).sum(1)
                n += x.shape[1]
        mean = acc / n
        std = np.sqrt(np.maximum(acc2 / n - mean * mean, 1e-12))
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def apply(self, img: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return (img - mean) / std


def normalize_mask(raw: np.ndarray) -> np.ndarray:
    """Any nonzero label value marks a changed pixel."""
    raw = np.asarray(raw)
    if raw.ndim == 3:
        raw = raw.max(axis=-1)
    return (raw > 0).astype(np.uint8)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1)


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_rgb(path, img: np.ndarray) -> None:
    """``img`` is 3xHxW uint8 or float in [0, 1]."""
    if img.dtype != np.uint8:
        img = to_uint8(img)
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(path)


def write_gray(path, img: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(img.astype(np.uint8))).save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _list_images(d: Path) -> dict:
    if not d.is_dir():
        raise IngestionError(f"missing directory {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_dataset(root, split: str = "train", require_masks: bool = True) -> List[BiTemporalTile]:
    """Read root/<split>/{A,B,label}; order is lexicographic by filename."""
    if split not in SPLITS:
        raise IngestionError(f"unknown split {split!r}, expected one of {SPLITS}")
    base = Path(root) / split
    a, b = _list_images(base / "A"), _list_images(base / "B")
    groups = {"A": a, "B": b}
    labels = {}
    if require_masks or (base / "label").is_dir():
        labels = groups["label"] = _list_images(base / "label")
    for name in sorted(set().union(*groups.values())):
        for d, files in groups.items():
            if name not in files:
                present = next(f[name] for f in groups.values() if name in f)
                raise IngestionError(f"{present}: no counterpart in {base / d}")
    tiles = []
    for name in sorted(a):
        t1 = read_rgb(a[name])
        t2 = read_rgb(b[name])
        mask = normalize_mask(read_gray(labels[name])) if name in labels else None
        if t1.shape != t2.shape or (mask is not None and mask.shape != t1.shape[1:]):
            raise CoregistrationError(
                f"{name}: A {t1.shape[1:]} B {t2.shape[1:]} "
                f"label {None if mask is None else mask.shape} differ in size"
            )
        tiles.append(BiTemporalTile(t1.astype(np.float32) / 255.0, t2.astype(np.float32) / 255.0, mask, name))
    return tiles


def save_dataset(root, splits: dict, ext: str = ".png") -> None:
    """Write {split: [tiles]} under the root/<split>/{A,B,label} layout."""
    for split, tiles in splits.items():
        for sub in ("A", "B", "label"):
            os.makedirs(Path(root) / split / sub, exist_ok=True)
        for t in tiles:
            write_rgb(Path(root) / split / "A" / f"{t.name}{ext}", t.t1)
            write_rgb(Path(root) / split / "B" / f"{t.name}{ext}", t.t2)
            write_gray(Path(root) / split / "label" / f"{t.name}{ext}", t.mask * 255)


def tile_pair(big_a: np.ndarray, big_b: np.ndarray, big_label: Optional[np.ndarray],
              size: int = 256, stride: int = 256) -> List[BiTemporalTile]:
    """Row-major grid crops of co-registered rasters (CxHxW images, HxW label).

    Edge remainders that do not fit a full tile are dropped.
    """
    if size <= 0 or size % 32:
        raise ShapeError(f"tile size {size} must be a positive multiple of 32")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if big_a.shape != big_b.shape:
        raise CoregistrationError(f"raster A {big_a.shape} vs B {big_b.shape}")
    h, w = big_a.shape[-2:]
    if big_label is not None and big_label.shape != (h, w):
        raise CoregistrationError(f"label {big_label.shape} vs raster {(h, w)}")
    if h < size or w < size:
        raise ShapeError(f"raster {h}x{w} is smaller than tile size {size}")
    tiles = []
    for i in range((h - size) // stride + 1):
        for j in range((w - size) // stride + 1):
            y, x = i * stride, j * stride
            sl = (slice(y, y + size), slice(x, x + size))
            tiles.append(BiTemporalTile(
                big_a[(...,) + sl].copy(),
                big_b[(...,) + sl].copy(),
                None if big_label is None else big_label[sl].copy(),
                name=f"{i}_{j}",
            ))
    return tiles


def _transform(x: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    if hflip:
        x = x[..., :, ::-1]
    if vflip:
        x = x[..., ::-1, :]
    if k:
        x = np.rot90(x, k, axes=(-2, -1))
    return np.ascontiguousarray(x)


def draw_augmentation(rng: np.random.Generator):
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    rotate = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4))
    return hflip, vflip, k if rotate else 0


def augment(tile: BiTemporalTile, rng: np.random.Generator) -> BiTemporalTile:
    """Random flips and right-angle rotation, shared by T1, T2 and the mask."""
    if tile.mask is None:
        raise DataError(f"{tile.name}: augmentation is for training tiles with masks")
    hflip, vflip, k = draw_augmentation(rng)
    return replace(
        tile,
        t1=_transform(tile.t1, hflip, vflip, k),
        t2=_transform(tile.t2, hflip, vflip, k),
        mask=_transform(tile.mask, hflip, vflip, k),
    )


# synthetic scenes -----------------------------------------------------------

def _texture(rng, size):
    """Smooth coloured noise plus a faint periodic pattern."""
    coarse = rng.random((3, size // 8 + 2, size // 8 + 2))
    yy, xx = np.mgrid[0:size, 0:size] / 8.0
    y0, x0 = yy.astype(int), xx.astype(int)
    fy, fx = yy - y0, xx - x0
    c = coarse
    tex = (c[:, y0, x0] * (1 - fy) * (1 - fx) + c[:, y0 + 1, x0] * fy * (1 - fx)
           + c[:, y0, x0 + 1] * (1 - fy) * fx + c[:, y0 + 1, x0 + 1] * fy * fx)
    base = rng.uniform(0.25, 0.55, size=(3, 1, 1))
    freq = rng.uniform(0.2, 0.6)
    stripes = 0.03 * np.sin(freq * (np.arange(size)[None, :] + np.arange(size)[:, None]))
    return base + 0.15 * (tex - 0.5) + stripes[None]


def _shape_mask(rng, size, area):
    """Boolean mask of one random rectangle or ellipse with roughly ``area`` pixels."""
    aspect = rng.uniform(0.5, 2.0)
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        hgt = max(3, int(round(np.sqrt(area * aspect))))
        wid = max(3, int(round(area / hgt)))
        hgt, wid = min(hgt, size - 2), min(wid, size - 2)
        y = rng.integers(0, size - hgt + 1)
        x = rng.integers(0, size - wid + 1)
        return (yy >= y) & (yy < y + hgt) & (xx >= x) & (xx < x + wid)
    ry = max(2.0, np.sqrt(area * aspect / np.pi))
    rx = max(2.0, area / (np.pi * ry))
    ry, rx = min(ry, size / 2 - 1), min(rx, size / 2 - 1)
    cy = rng.uniform(ry, size - ry)
    cx = rng.uniform(rx, size - rx)
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _object_colour(rng):
    # bright roofs or dark tarmac, well away from the background range
    if rng.random() < 0.5:
        return rng.uniform(0.75, 0.95, size=(3, 1, 1))
    return rng.uniform(0.02, 0.15, size=(3, 1, 1))


def _distract(img, rng):
    """Illumination shift and speckle; never recorded in the mask."""
    gain = 1.0 + rng.uniform(-0.15, 0.15)
    shift = rng.uniform(-0.15, 0.15)
    speckle = rng.normal(0.0, 0.02, size=img.shape)
    return (img - 0.5) * gain + 0.5 + shift + speckle


def synth_tile(rng: np.random.Generator, size: int, change_rate: float, name: str = "") -> BiTemporalTile:
    scene = _texture(rng, size)
    before = scene.copy()
    after = scene.copy()
    mask = np.zeros((size, size), dtype=bool)
    n_changes = int(rng.integers(1, 5))
    mean_area = change_rate * size * size / 2.5
    for _ in range(n_changes):
        region = _shape_mask(rng, size, mean_area * rng.uniform(0.5, 1.5))
        colour = _object_colour(rng)
        if rng.random() < 0.6:
            after = np.where(region, colour, after)   # built
        else:
            before = np.where(region, colour, before)  # demolished
            after = np.where(region, scene, after)
        mask |= region

    t1 = to_uint8(np.clip(_distract(before, rng), 0, 1)).astype(np.float32) / 255.0
    t2 = to_uint8(np.clip(_distract(after, rng), 0, 1)).astype(np.float32) / 255.0
    return BiTemporalTile(t1, t2, mask.astype(np.uint8), name)


def synth_generate(seed: int, n: int, size: int = 64, change_rate: float = 0.15) -> List[BiTemporalTile]:
    """Deterministic synthetic bi-temporal dataset; each sample gets its own child seed."""
    if size <= 0 or size % 32:
        raise ShapeError(f"synthetic tile size {size} must be a positive multiple of 32")
    if not 0 < change_rate < 1:
        raise DataError(f"change_rate must be in (0, 1), got {change_rate}")
    children = np.random.SeedSequence(seed).spawn(n)
    return [synth_tile(np.random.default_rng(c), size, change_rate, name=f"{i:05d}")
            for i, c in enumerate(children)]


def split_sizes(n: int, fractions=(0.7, 0.15, 0.15)):
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def synth_splits(seed: int, n: int, size: int = 64, change_rate: float = 0.15) -> dict:
    tiles = synth_generate(seed, n, size, change_rate)
    n_train, n_val, _ = split_sizes(n)
    return {
        "train": tiles[:n_train],
        "val": tiles[n_train:n_train + n_val],
        "test": tiles[n_train + n_val:],
    }


def stack_batch(tiles: Iterable[BiTemporalTile], stats: ChannelStats):
    """Standardize and stack into (t1, t2, mask-or-None) numpy batches."""
    tiles = list(tiles)
    t1 = np.stack([stats.apply(t.t1) for t in tiles]).astype(np.float32)
    t2 = np.stack([stats.apply(t.t2) for t in tiles]).astype(np.float32)
    masks = None
    if all(t.mask is not None for t in tiles):
        masks = np.stack([t.mask for t in tiles]).astype(np.int64)
    return t1, t2, masks
