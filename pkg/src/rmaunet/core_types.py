"""Shared raster and record types. No algorithms here.

Conventions: rasters are row-major numpy arrays with origin at the top-left,
rows increasing downward. Tiles are float32 (H, W, C); masks are uint8 (H, W)
with values in {0, 1}, 1 = landslide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NonBinaryMask, NonFiniteData, ShapeMismatch


@dataclass(frozen=True)
class Tile:
    """One multispectral chip: (H, W, C) float32 raster plus band names."""

    id: str
    data: np.ndarray
    band_names: tuple

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch(f"tile data must be (H, W, C), got {self.data.shape}")
        if len(self.band_names) != self.data.shape[2]:
            raise ShapeMismatch(
                f"{len(self.band_names)} band names for {self.data.shape[2]} channels"
            )
        if len(set(self.band_names)) != len(self.band_names):
            raise ShapeMismatch(f"duplicate band names: {self.band_names}")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        self.data.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def band(self, name: str) -> np.ndarray:
        if name not in self.band_names:
            from .errors import MissingBand

            raise MissingBand(f"tile {self.id!r} has no band {name!r}")
        return self.data[:, :, self.band_names.index(name)]


@dataclass(frozen=True)
class MaskImage:
    """Binary ground-truth raster, uint8 (H, W), 1 = landslide."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatch(f"mask must be (H, W), got {self.values.shape}")
        if self.values.dtype != np.uint8:
            object.__setattr__(self, "values", self.values.astype(np.uint8))
        self.values.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def positive_count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel probability raster, float32 (H, W), values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatch(f"prob map must be (H, W), got {self.values.shape}")
        if self.values.dtype != np.float32:
            object.__setattr__(self, "values", self.values.astype(np.float32))
        vmin, vmax = float(self.values.min()), float(self.values.max())
        if not (np.isfinite(vmin) and np.isfinite(vmax)):
            raise NonFiniteData("prob map contains NaN/Inf")
        if vmin < 0.0 or vmax > 1.0:
            raise NonFiniteData(f"prob map values outside [0,1]: [{vmin}, {vmax}]")
        self.values.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SampleRecord:
    """Manifest row binding a tile to its mask/label and split."""

    tile_path: str
    mask_path: Optional[str] = None
    image_label: Optional[str] = None  # "landslide" | "none"
    split: str = "train"  # "train" | "val" | "test"

    def __post_init__(self):
        if self.mask_path is None and self.image_label is None:
            raise ShapeMismatch(
                f"record {self.tile_path!r} needs a mask_path or an image_label"
            )
        if self.image_label not in (None, "landslide", "none"):
            raise ShapeMismatch(f"bad image_label {self.image_label!r}")
        if self.split not in ("train", "val", "test"):
            raise ShapeMismatch(f"bad split {self.split!r}")


@dataclass
class ConfusionCounts:
    """tp/fp/fn/tn accumulator; every reported metric derives from it."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def validate_pair(tile: Tile, mask: MaskImage) -> None:
    """Raise if the tile/mask pair violates any invariant."""
    if (tile.height, tile.width) != (mask.height, mask.width):
        raise ShapeMismatch(
            f"tile {tile.height}x{tile.width} vs mask {mask.height}x{mask.width}"
        )
    if not np.isfinite(tile.data).all():
        raise NonFiniteData(f"tile {tile.id!r} data contains NaN/Inf")
    bad = np.setdiff1d(np.unique(mask.values), [0, 1])
    if bad.size:
        raise NonBinaryMask(f"mask contains values {bad.tolist()}")
