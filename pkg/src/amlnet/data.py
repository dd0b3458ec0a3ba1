"""Datasets: PNG loading, resizing, tiling and a synthetic cell generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image, ImageColor
from PIL.PngImagePlugin import PngInfo

from .numerics import bilinear_resize

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
WBC_CLASSES = ("background", "cytoplasm", "nucleus")
WBC_PALETTE = {"black": 0, "gray": 1, "white": 2}


@dataclass
class SegDataset:
    images: list          # float32 arrays (3, H, W) in [0, 1]
    masks: list           # int64 arrays (H, W)
    num_classes: int
    names: list = field(default_factory=list)
    class_names: tuple = ()

    def __post_init__(self):
        if not self.names:
            self.names = [f"{i:04d}" for i in range(len(self.images))]
        if not self.class_names:
            self.class_names = tuple(str(c) for c in range(self.num_classes))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SegDataset":
        idx = list(idx)
        return SegDataset([self.images[i] for i in idx], [self.masks[i] for i in idx],
                          self.num_classes, [self.names[i] for i in idx], self.class_names)

    def tensors(self, idx=None) -> tuple[torch.Tensor, torch.Tensor]:
        idx = range(len(self)) if idx is None else idx
        imgs = torch.from_numpy(np.stack([self.images[i] for i in idx]))
        masks = torch.from_numpy(np.stack([self.masks[i] for i in idx]))
        return imgs, masks

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for s in range(0, len(order), batch_size):
            yield self.tensors(order[s:s + batch_size])


def _rgb(key) -> tuple[int, int, int]:
    if isinstance(key, (int, np.integer)):
        return (int(key),) * 3
    if isinstance(key, (tuple, list)):
        return tuple(int(v) for v in key)
    return ImageColor.getrgb(str(key))[:3]


def normalize_palette(palette: dict) -> dict:
    """Map palette keys (color names, '#rrggbb', gray levels, RGB triples) to RGB triples."""
    return {_rgb(k): int(v) for k, v in palette.items()}


def decode_mask(rgb: np.ndarray, palette: dict, where: str = "mask") -> np.ndarray:
    pal = normalize_palette(palette)
    out = np.full(rgb.shape[:2], -1, dtype=np.int64)
    for color, cls in pal.items():
        out[np.all(rgb == np.array(color, dtype=rgb.dtype), axis=-1)] = cls
    if (out < 0).any():
        y, x = (int(i) for i in np.argwhere(out < 0)[0])
        raise ValueError(f"{where}: unknown mask color {tuple(int(c) for c in rgb[y, x])} at (row={y}, col={x})")
    return out


def encode_mask(mask: np.ndarray, palette: dict) -> np.ndarray:
    inv = {cls: color for color, cls in normalize_palette(palette).items()}
    rgb = np.zeros(mask.shape + (3,), dtype=np.uint8)
    for cls, color in inv.items():
        rgb[mask == cls] = color
    return rgb


def _stems(d: Path) -> dict:
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_image_mask_dir(images_dir, masks_dir, palette: dict,
                        class_names: tuple = ()) -> SegDataset:
    images, masks = _stems(Path(images_dir)), _stems(Path(masks_dir))
    missing = sorted(set(images) ^ set(masks))
    if missing:
        raise FileNotFoundError(f"images and masks are not paired for stems: {missing}")
    num_classes = max(palette.values()) + 1 if palette else 0
    ds = SegDataset([], [], num_classes, [], class_names)
    for stem in sorted(images):
        img = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.float32) / 255.0
        rgb = np.asarray(Image.open(masks[stem]).convert("RGB"))
        ds.images.append(np.ascontiguousarray(img.transpose(2, 0, 1)))
        ds.masks.append(decode_mask(rgb, palette, where=str(masks[stem])))
        ds.names.append(stem)
    return ds


def save_dataset(ds: SegDataset, out_dir, palette: dict, digest: str = "") -> Path:
    """Write images/, masks/ and a manifest.txt index (one ``name`` per line)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    info = PngInfo()
    if digest:
        info.add_text("config_digest", digest)
    for name, img, mask in zip(ds.names, ds.images, ds.masks):
        arr = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / "images" / f"{name}.png", pnginfo=info)
        Image.fromarray(encode_mask(mask, palette)).save(out / "masks" / f"{name}.png", pnginfo=info)
    with open(out / "manifest.txt", "w") as fh:
        if digest:
            fh.write(f"# config_digest={digest}\n")
        for name in ds.names:
            fh.write(f"{name}\timages/{name}.png\tmasks/{name}.png\n")
    return out


def load_dataset(root, palette: dict, class_names: tuple = ()) -> SegDataset:
    root = Path(root)
    return load_image_mask_dir(root / "images", root / "masks", palette, class_names)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, consistent with the bilinear convention
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    return mask[np.ix_(_nearest_index(mask.shape[0], h), _nearest_index(mask.shape[1], w))]


def resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(img)[None]
    return bilinear_resize(t, h, w)[0].numpy().astype(np.float32)


def resize_dataset(ds: SegDataset, h: int, w: int) -> SegDataset:
    """Images bilinear, masks nearest-neighbour."""
    return SegDataset([resize_image(i, h, w) for i in ds.images],
                      [resize_mask(m, h, w) for m in ds.masks],
                      ds.num_classes, list(ds.names), ds.class_names)


def tile_array(a: np.ndarray, tile: int) -> list:
    h, w = a.shape[-2:]
    if h % tile or w % tile:
        raise ValueError(f"size {h}x{w} is not divisible by tile {tile}")
    return [a[..., r:r + tile, c:c + tile].copy()
            for r in range(0, h, tile) for c in range(0, w, tile)]


def untile_array(tiles: list, rows: int, cols: int) -> np.ndarray:
    return np.concatenate(
        [np.concatenate(tiles[r * cols:(r + 1) * cols], axis=-1) for r in range(rows)], axis=-2)


def tile_dataset(ds: SegDataset, tile: int = 256) -> SegDataset:
    """Cut every image into non-overlapping ``tile``-sized squares, row-major."""
    out = SegDataset([], [], ds.num_classes, [], ds.class_names)
    for name, img, mask in zip(ds.names, ds.images, ds.masks):
        cols = mask.shape[1] // tile
        for i, (ti, tm) in enumerate(zip(tile_array(img, tile), tile_array(mask, tile))):
            out.images.append(ti)
            out.masks.append(tm)
            out.names.append(f"{name}_r{i // cols}_c{i % cols}")
    return out


@dataclass
class SynthSpec:
    image_size: int = 64
    num_images: int = 64
    cells: tuple = (1, 3)              # inclusive range of cells per image
    cell_radius: tuple = (9, 16)       # inclusive range, pixels
    nucleus_scale: tuple = (0.35, 0.6)  # nucleus radius / cell radius
    distractors: tuple = (0, 2)
    distractor_radius: tuple = (5, 9)
    noise: float = 0.03
    share_bounds: dict = field(default_factory=lambda: {1: (0.02, 0.6), 2: (0.005, 0.3)})
    seed: int = 0

    def __post_init__(self):
        self.share_bounds = {int(k): tuple(v) for k, v in self.share_bounds.items()}
        lo, hi = self.nucleus_scale
        if not 0 < lo <= hi:
            raise ValueError("nucleus_scale must be a positive, ordered range")
        if hi >= 1.0:
            raise ValueError("nucleus would not fit inside its cytoplasm (nucleus_scale >= 1)")
        if self.cell_radius[0] < 2 or self.cell_radius[1] * 2 >= self.image_size:
            raise ValueError("cell_radius out of range for this image size")


# mean RGB in 0..255; distractors reuse the cytoplasm statistics on purpose
_COLORS = {0: (236, 222, 226), 1: (190, 156, 204), 2: (98, 52, 140)}


def _ellipse(size: int, cy: int, cx: int, ry: int, rx: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.int64)
    dy, dx = yy - cy, xx - cx
    return (dx * ry) ** 2 + (dy * rx) ** 2 <= (rx * ry) ** 2


def _render_one(spec: SynthSpec, rng: np.random.Generator):
    s = spec.image_size
    labels = np.zeros((s, s), dtype=np.int64)
    distract = np.zeros((s, s), dtype=bool)
    for _ in range(int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))):
        r = int(rng.integers(spec.distractor_radius[0], spec.distractor_radius[1] + 1))
        cy, cx = (int(v) for v in rng.integers(r, s - r, size=2))
        distract |= _ellipse(s, cy, cx, r, r)
    for _ in range(int(rng.integers(spec.cells[0], spec.cells[1] + 1))):
        ry, rx = (int(v) for v in rng.integers(spec.cell_radius[0], spec.cell_radius[1] + 1, size=2))
        cy = int(rng.integers(ry, s - ry))
        cx = int(rng.integers(rx, s - rx))
        cell = _ellipse(s, cy, cx, ry, rx)
        scale = rng.uniform(*spec.nucleus_scale)
        nry, nrx = max(1, int(ry * scale)), max(1, int(rx * scale))
        oy = int(rng.integers(-(ry - nry) // 2, (ry - nry) // 2 + 1))
        ox = int(rng.integers(-(rx - nrx) // 2, (rx - nrx) // 2 + 1))
        nucleus = _ellipse(s, cy + oy, cx + ox, nry, nrx) & cell
        labels[cell] = 1
        labels[nucleus] = 2
    distract &= labels == 0

    img = np.empty((s, s, 3), dtype=np.float64)
    for cls, color in _COLORS.items():
        jitter = rng.normal(0.0, 8.0, size=3)
        img[labels == cls] = np.array(color) + jitter
    img[distract] = np.array(_COLORS[1]) + rng.normal(0.0, 8.0, size=3)
    img += rng.normal(0.0, spec.noise * 255.0, size=img.shape)
    img8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img8, labels


def _shares_ok(labels: np.ndarray, bounds: dict) -> bool:
    n = labels.size
    return all(lo <= (labels == c).sum() / n <= hi for c, (lo, hi) in bounds.items())


def synth_generate(spec: SynthSpec, max_attempts: int = 200) -> SegDataset:
    """Deterministic 3-class synthetic cells (background / cytoplasm / nucleus).

    Every image is re-drawn until each bounded class share falls inside
    ``spec.share_bounds``.
    """
    rng = np.random.default_rng(spec.seed)
    ds = SegDataset([], [], 3, [], WBC_CLASSES)
    for i in range(spec.num_images):
        for _ in range(max_attempts):
            img8, labels = _render_one(spec, rng)
            if _shares_ok(labels, spec.share_bounds):
                break
        else:
            raise RuntimeError(f"could not satisfy share bounds for image {i}")
        ds.images.append(np.ascontiguousarray(img8.transpose(2, 0, 1)).astype(np.float32) / 255.0)
        ds.masks.append(labels)
        ds.names.append(f"synth_{spec.seed}_{i:04d}")
    return ds
