"""Procedural 4-class shape dataset and sticker pasting.

Images are (1, 32, 32) float32 in [0, 1]: one bright shape (disc,
square, cross, triangle) on a dark noisy background.  Everything is a
pure function of (seed, split, index), so datasets are regenerated from
a tiny manifest instead of being shipped; items can be produced in
parallel because each index owns a derived stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng, mix64

CLASS_NAMES = ("disc", "square", "cross", "triangle")
IMAGE_HW = (32, 32)
NOISE_AMPLITUDE = 0.1

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str
    seed: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"images ({len(self.images)}) and labels "
                             f"({len(self.labels)}) differ on axis 0")

    def __len__(self) -> int:
        return len(self.images)


def _split_code(split: str) -> int:
    base = split.split("+")[0]
    if base not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}; use train/val/test")
    return _SPLIT_CODES[base]


def _draw_shape(cls: int, rng: Rng) -> np.ndarray:
    """Boolean 32x32 mask; geometry stays inside the frame."""
    h, w = IMAGE_HW
    u = rng.floats(3)
    r = 4 + int(u[0] * 6)                       # half-extent, 4..9
    cy = r + 1 + int(u[1] * (h - 2 * r - 2))
    cx = r + 1 + int(u[2] * (w - 2 * r - 2))
    ii, jj = np.indices((h, w))
    di, dj = ii - cy, jj - cx
    if cls == 0:
        return di * di + dj * dj <= r * r
    if cls == 1:
        return (np.abs(di) <= r - 1) & (np.abs(dj) <= r - 1)
    if cls == 2:
        t = max(1, r // 3)
        return ((np.abs(di) <= t) & (np.abs(dj) <= r)) | \
               ((np.abs(dj) <= t) & (np.abs(di) <= r))
    # triangle: apex up, width grows with the row
    row = di + r  # 0 at the apex row
    return (row >= 0) & (row <= 2 * r) & (np.abs(dj) * 2 <= row)


def _render_item(seed: int, split_code: int, index: int, cls: int) -> np.ndarray:
    rng = Rng(mix64(seed, split_code, index))
    mask = _draw_shape(cls, rng)
    noise = rng.floats(IMAGE_HW[0] * IMAGE_HW[1]).reshape(IMAGE_HW)
    img = mask.astype(np.float64) + noise * NOISE_AMPLITUDE
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def gen_shapes(seed: int, n: int, split: str = "train") -> LabeledDataset:
    """Class-balanced dataset of n images (class = index mod 4)."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    code = _split_code(split)
    labels = np.arange(n, dtype=np.int64) % len(CLASS_NAMES)
    images = np.stack([_render_item(seed, code, i, int(labels[i]))
                       for i in range(n)])
    return LabeledDataset(images, labels, split, seed)


def apply_stickers(image: np.ndarray, sticker, count: int = 3,
                   seed: int = 0) -> np.ndarray:
    """Paste `count` copies of the sticker bitmap at random positions.

    Positions are uniform over the placements that keep the bitmap fully
    inside the frame; overlaps are allowed and the last paste wins.
    Pasted pixels are set to the exact bitmap values.
    """
    if count < 1:
        raise ValueError("sticker count must be at least 1")
    img = np.array(image, copy=True)
    chan = img[0] if img.ndim == 3 else img
    bitmap = np.asarray(sticker.bitmap, dtype=img.dtype)
    sh, sw = bitmap.shape
    h, w = chan.shape
    if sh > h or sw > w:
        raise ValueError(f"sticker {sh}x{sw} larger than image {h}x{w}")
    rng = Rng(seed)
    tops = rng.ints(count, h - sh + 1)
    lefts = rng.ints(count, w - sw + 1)
    for t, l in zip(tops, lefts):
        chan[t:t + sh, l:l + sw] = bitmap
    return img


def with_stickers(ds: LabeledDataset, sticker, count: int = 3,
                  seed: int = 0) -> LabeledDataset:
    """Sticker every image; per-image streams derive from (seed, index)."""
    images = np.stack([apply_stickers(ds.images[i], sticker, count,
                                      mix64(seed, i))
                       for i in range(len(ds))])
    return LabeledDataset(images, ds.labels.copy(), ds.split + "+stickers", seed)


def dataset_manifest(ds: LabeledDataset) -> dict:
    """Everything needed to regenerate a gen_shapes dataset bit-for-bit.

    Stickered datasets are refused: their pixels depend on the sticker
    bitmap, which the manifest does not carry.
    """
    if "+" in ds.split:
        raise ValueError(f"split {ds.split!r} is derived; only plain "
                         "gen_shapes datasets regenerate from a manifest")
    return {"seed": int(ds.seed), "n": len(ds), "split": ds.split}


def dataset_from_manifest(manifest: dict) -> LabeledDataset:
    return gen_shapes(int(manifest["seed"]), int(manifest["n"]),
                      manifest["split"])
