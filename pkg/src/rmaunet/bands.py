"""Derived bands 15-26 and recipe-driven channel expansion.

All filters are hand-rolled so the anchoring and edge policy are explicit:
the 10x10 window covers offsets [-5, +4] around the output pixel in both
axes, with edge-replication padding. Internals run in float64; emitted
bands are float32.

Derived band sequence (fixed order):
    B15, B16, B17  min-max normalized B2, B3, B4
    B18, B19, B20  NDVI, NDMI, NBR
    B21            gray = (B2 + B3 + B4) / 3
    B22, B23       gaussian(sigma=2.0) and median filtered gray, 10x10
    B24, B25       gray gradients across width (d/dx) and height (d/dy)
    B26            Canny edges of the normalized gray band
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .core_types import Tile
from .errors import MissingBand

GAUSS_SIGMA = 2.0
CANNY_BLUR_SIGMA = 1.0
CANNY_LO_PCT = 70.0
CANNY_HI_PCT = 90.0


def minmax_normalize(band: np.ndarray) -> np.ndarray:
    x = band.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


_INDEX_BANDS = {"NDVI": ("B8", "B4"), "NDMI": ("B8", "B11"), "NBR": ("B8", "B12")}


def spectral_index(tile: Tile, kind: str) -> np.ndarray:
    """Normalized difference (a-b)/(a+b); zero where the denominator is zero."""
    if kind not in _INDEX_BANDS:
        raise ValueError(f"unknown index {kind!r}")
    name_a, name_b = _INDEX_BANDS[kind]
    a = tile.band(name_a).astype(np.float64)
    b = tile.band(name_b).astype(np.float64)
    den = a + b
    out = np.zeros_like(a)
    np.divide(a - b, den, out=out, where=den != 0)
    return out.astype(np.float32)


def grayscale(tile: Tile) -> np.ndarray:
    stack = [tile.band(n).astype(np.float64) for n in ("B2", "B3", "B4")]
    return ((stack[0] + stack[1] + stack[2]) / 3.0).astype(np.float32)


def _pad_for_window(band: np.ndarray, before: int, after: int) -> np.ndarray:
    return np.pad(band.astype(np.float64), ((before, after), (before, after)), mode="edge")


def _windows_10x10(band: np.ndarray) -> np.ndarray:
    # window rows/cols [-5, +4] relative to the output pixel
    padded = _pad_for_window(band, 5, 4)
    return np.lib.stride_tricks.sliding_window_view(padded, (10, 10))


def gaussian_kernel_10x10(sigma: float = GAUSS_SIGMA) -> np.ndarray:
    offs = np.arange(-5, 5, dtype=np.float64)
    g = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def smooth(band: np.ndarray, kind: str) -> np.ndarray:
    win = _windows_10x10(band)
    if kind == "gaussian":
        out = np.tensordot(win, gaussian_kernel_10x10(), axes=([2, 3], [0, 1]))
    elif kind == "median":
        h, w = band.shape
        out = np.median(win.reshape(h, w, 100), axis=2)
    else:
        raise ValueError(f"unknown smooth kind {kind!r}")
    return out.astype(np.float32)


def gradients(band: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated edges; gx across width, gy across height."""
    p = _pad_for_window(band, 1, 1)
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return gx.astype(np.float32), gy.astype(np.float32)


def _gaussian_blur_odd(band: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    padded = _pad_for_window(band, radius, radius)
    win = np.lib.stride_tricks.sliding_window_view(padded, g.shape)
    return np.tensordot(win, g, axes=([2, 3], [0, 1]))


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)

# neighbor offsets along the quantized gradient direction, keyed by bin
_NMS_OFFSETS = {
    0: ((0, 1), (0, -1)),
    45: ((1, 1), (-1, -1)),
    90: ((1, 0), (-1, 0)),
    135: ((1, -1), (-1, 1)),
}


def _quantize_angle(deg: np.ndarray) -> np.ndarray:
    d = np.mod(deg, 180.0)
    out = np.full(d.shape, 0, dtype=np.int32)
    out[(d >= 22.5) & (d < 67.5)] = 45
    out[(d >= 67.5) & (d < 112.5)] = 90
    out[(d >= 112.5) & (d < 157.5)] = 135
    return out


def canny(band: np.ndarray) -> np.ndarray:
    """Canny edges: blur, Sobel, 4-bin NMS, percentile hysteresis. Output in {0,1}.

    Expects a band already normalized to [0,1]. Thresholds are the 70th/90th
    percentiles of the pre-suppression gradient magnitude; a flat band has
    zero magnitude everywhere and returns all zeros.
    """
    h, w = band.shape
    blurred = _gaussian_blur_odd(band, CANNY_BLUR_SIGMA, radius=4)
    padded = np.pad(blurred, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = np.tensordot(win, _SOBEL_X, axes=([2, 3], [0, 1]))
    gy = np.tensordot(win, _SOBEL_Y, axes=([2, 3], [0, 1]))
    mag = np.hypot(gx, gy)

    hi = np.percentile(mag, CANNY_HI_PCT)
    lo = np.percentile(mag, CANNY_LO_PCT)
    if hi <= 0.0:
        return np.zeros((h, w), dtype=np.float32)

    bins = _quantize_angle(np.degrees(np.arctan2(gy, gx)))
    nms = np.zeros_like(mag)
    for b, ((dr1, dc1), (dr2, dc2)) in _NMS_OFFSETS.items():
        sel = bins == b
        for dr, dc in ((dr1, dc1), (dr2, dc2)):
            nb = np.zeros_like(mag)  # out-of-bounds neighbors count as 0
            rs = slice(max(0, dr), h + min(0, dr))
            cs = slice(max(0, dc), w + min(0, dc))
            rd = slice(max(0, -dr), h + min(0, -dr))
            cd = slice(max(0, -dc), w + min(0, -dc))
            nb[rd, cd] = mag[rs, cs]
            sel = sel & (mag >= nb)
        nms[sel] = mag[sel]

    strong = nms >= hi
    weak = nms >= lo
    out = strong.copy()
    queue = deque(zip(*np.nonzero(strong)))
    while queue:
        r, c = queue.popleft()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and weak[rr, cc] and not out[rr, cc]:
                    out[rr, cc] = True
                    queue.append((rr, cc))
    return out.astype(np.float32)


@dataclass(frozen=True)
class BandSpec:
    name: str
    formula: str  # minmax | index | gray | smooth | gradient | canny
    params: tuple = ()


@dataclass(frozen=True)
class BandRecipe:
    """Ordered derived-band specs plus the resulting channel count."""

    name: str
    specs: Tuple[BandSpec, ...]
    output_channels: int


_ALL_SPECS = (
    BandSpec("B15", "minmax", ("B2",)),
    BandSpec("B16", "minmax", ("B3",)),
    BandSpec("B17", "minmax", ("B4",)),
    BandSpec("B18", "index", ("NDVI",)),
    BandSpec("B19", "index", ("NDMI",)),
    BandSpec("B20", "index", ("NBR",)),
    BandSpec("B21", "gray", ()),
    BandSpec("B22", "smooth", ("gaussian",)),
    BandSpec("B23", "smooth", ("median",)),
    BandSpec("B24", "gradient", ("x",)),
    BandSpec("B25", "gradient", ("y",)),
    BandSpec("B26", "canny", ()),
)

_PRESET_LAST = {
    "none": 14,
    "b15-17": 17,
    "b15-21": 21,
    "b15-23": 23,
    "b15-25": 25,
    "b15-26": 26,
}

RECIPE_NAMES = tuple(_PRESET_LAST)


def make_recipe(preset: str, band_names) -> BandRecipe:
    """Build a recipe for a given input band set.

    Index bands (B18-B20) need B8/B11/B12 and are dropped for RGB inputs;
    everything else requires B2/B3/B4 and raises at expand time if absent.
    """
    if preset not in _PRESET_LAST:
        raise ValueError(f"unknown recipe {preset!r}; have {RECIPE_NAMES}")
    last = _PRESET_LAST[preset]
    specs = []
    for spec in _ALL_SPECS:
        if int(spec.name[1:]) > last:
            break
        if spec.formula == "index":
            _, src = _INDEX_BANDS[spec.params[0]]
            if src not in band_names or "B8" not in band_names:
                continue
        specs.append(spec)
    return BandRecipe(preset, tuple(specs), len(band_names) + len(specs))


def expand_bands(tile: Tile, recipe: BandRecipe) -> Tile:
    """Append the recipe's derived bands in order; empty recipe returns the tile."""
    if not recipe.specs:
        return tile
    gray = None
    derived: List[np.ndarray] = []
    names: List[str] = []
    for spec in recipe.specs:
        if spec.formula == "minmax":
            band = minmax_normalize(tile.band(spec.params[0]))
        elif spec.formula == "index":
            band = spectral_index(tile, spec.params[0])
        elif spec.formula == "gray":
            gray = grayscale(tile)
            band = gray
        elif spec.formula == "smooth":
            gray = grayscale(tile) if gray is None else gray
            band = smooth(gray, spec.params[0])
        elif spec.formula == "gradient":
            gray = grayscale(tile) if gray is None else gray
            gx, gy = gradients(gray)
            band = gx if spec.params[0] == "x" else gy
        elif spec.formula == "canny":
            gray = grayscale(tile) if gray is None else gray
            band = canny(minmax_normalize(gray))
        else:
            raise MissingBand(f"unknown formula {spec.formula!r}")
        derived.append(band)
        names.append(spec.name)
    data = np.concatenate([tile.data] + [b[:, :, None] for b in derived], axis=2)
    return Tile(id=tile.id, data=data, band_names=tile.band_names + tuple(names))
