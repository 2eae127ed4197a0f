"""Image resampling and PNG I/O for heatmaps and dataset frames.

PNG files are written 8-bit non-interlaced with a fixed compression
level, so identical pixel data yields identical bytes.  Upsampling is
plain bilinear interpolation with half-pixel-centered sampling and
edge clamping.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

_PNG_OPTS = {"format": "PNG", "optimize": False, "compress_level": 6}


def bilinear_resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize a 2d array.  Output pixel centers map to input coordinates
    via in = (out + 0.5) * (in_size / out_size) - 0.5, clamped at the
    edges; corners therefore reproduce the corner input values."""
    if img.ndim != 2:
        raise ValueError("bilinear_resize expects a 2d array")
    ih, iw = img.shape
    oh, ow = out_hw
    src = img.astype(np.float64)

    def axis_coords(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
        return lo, pos - lo

    yl, yf = axis_coords(ih, oh)
    xl, xf = axis_coords(iw, ow)
    tl = src[np.ix_(yl, xl)]
    tr = src[np.ix_(yl, xl + (1 if iw > 1 else 0))]
    bl = src[np.ix_(yl + (1 if ih > 1 else 0), xl)]
    br = src[np.ix_(yl + (1 if ih > 1 else 0), xl + (1 if iw > 1 else 0))]
    top = tl + (tr - tl) * xf[None, :]
    bot = bl + (br - bl) * xf[None, :]
    out = top + (bot - top) * yf[:, None]
    return out.astype(img.dtype) if img.dtype.kind == "f" else out


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_gray_png(img01: np.ndarray, path) -> None:
    """8-bit grayscale PNG from values in [0, 1]."""
    Image.fromarray(to_uint8(img01), mode="L").save(path, **_PNG_OPTS)


def read_gray_png(path) -> np.ndarray:
    """PNG (any color type) to a 2d float32 array in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_heatmap_png(heatmap: np.ndarray, base_image: np.ndarray | None,
                      path, out_hw: tuple[int, int] = (32, 32)) -> None:
    """Heatmap (values in [0, 1]) upsampled to out_hw and written to PNG.

    Without a base image: grayscale, white = strong influence.  With a
    base image (grayscale, same resolution as out_hw): RGB overlay where
    each pixel is blended from the gray base toward pure blue by the
    heatmap value, so blue marks influential regions.
    """
    hm = np.clip(bilinear_resize(np.asarray(heatmap, dtype=np.float64), out_hw),
                 0.0, 1.0)
    if base_image is None:
        write_gray_png(hm, path)
        return
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim == 3:
        base = base[0]
    if base.shape != tuple(out_hw):
        raise ValueError(f"base image {base.shape} does not match output "
                         f"resolution {tuple(out_hw)}")
    gray = np.clip(base, 0.0, 1.0)
    r = gray * (1.0 - hm)
    g = gray * (1.0 - hm)
    b = gray * (1.0 - hm) + hm
    rgb = to_uint8(np.stack([r, g, b], axis=-1))
    Image.fromarray(rgb, mode="RGB").save(path, **_PNG_OPTS)
