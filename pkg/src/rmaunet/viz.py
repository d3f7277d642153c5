"""Overlay rendering: predicted mask tint over an RGB composite, with the
ground-truth boundary drawn as a contour."""

from __future__ import annotations

from typing import Optional

import numpy as np
from PIL import Image

from .core_types import MaskImage, Tile


def _rgb_composite(tile: Tile) -> np.ndarray:
    """(H, W, 3) uint8 composite from the B4/B3/B2 roles or first channels."""
    names = tile.band_names
    if all(b in names for b in ("B4", "B3", "B2")):
        chans = [tile.band(b) for b in ("B4", "B3", "B2")]
    else:
        idx = list(range(min(3, tile.channels)))
        while len(idx) < 3:
            idx.append(idx[-1])
        chans = [tile.data[:, :, i] for i in idx]
    out = np.zeros((tile.height, tile.width, 3), dtype=np.float64)
    for i, ch in enumerate(chans):
        lo, hi = float(ch.min()), float(ch.max())
        out[:, :, i] = 0.0 if hi == lo else (ch - lo) / (hi - lo)
    return (out * 255).astype(np.uint8)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbor outside the mask."""
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def render_overlay(
    tile: Tile, pred: MaskImage, gt: Optional[MaskImage] = None
) -> Image.Image:
    """Red tint where the prediction is positive; green ground-truth contour."""
    rgb = _rgb_composite(tile).astype(np.float64)
    fg = pred.values.astype(bool)
    rgb[fg] = 0.55 * rgb[fg] + 0.45 * np.array([255.0, 0.0, 0.0])
    if gt is not None:
        rgb[_boundary(gt.values)] = [0.0, 255.0, 0.0]
    return Image.fromarray(rgb.astype(np.uint8))
