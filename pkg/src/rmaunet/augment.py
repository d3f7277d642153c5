"""Online rotation and cutmix augmentation, applied jointly to tiles and masks.

Determinism contract: each sample gets its own SplitMix64 stream derived from
(seed, epoch, sample index), so results do not depend on worker scheduling or
batch composition order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core_types import MaskImage, Tile
from .errors import NonSquareTile, ShapeMismatch
from .rng import SplitMix64, derive_seed

ANGLES = (90, 180, 270)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_prob: float = 0.5
    cutmix_prob: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("rotation_prob", "cutmix_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ShapeMismatch(f"{name} must be in [0,1], got {p}")


def rotate(tile: Tile, mask: Optional[MaskImage], angle: int) -> Tuple[Tile, Optional[MaskImage]]:
    """Rotate tile and mask clockwise by 90/180/270 about the raster center."""
    if angle not in ANGLES:
        raise ShapeMismatch(f"angle must be one of {ANGLES}, got {angle}")
    if tile.height != tile.width:
        raise NonSquareTile(f"tile {tile.id!r} is {tile.height}x{tile.width}")
    k = -(angle // 90)  # np.rot90 turns counterclockwise; negate for clockwise
    data = np.ascontiguousarray(np.rot90(tile.data, k=k, axes=(0, 1)))
    out_tile = Tile(id=tile.id, data=data, band_names=tile.band_names)
    out_mask = None
    if mask is not None:
        out_mask = MaskImage(values=np.ascontiguousarray(np.rot90(mask.values, k=k)))
    return out_tile, out_mask


def cutmix(
    target: Tuple[Tile, MaskImage], donor: Tuple[Tile, MaskImage]
) -> Tuple[Tile, MaskImage]:
    """Paste the donor's landslide footprint (all channels) into the target."""
    t_tile, t_mask = target
    d_tile, d_mask = donor
    if t_tile.data.shape != d_tile.data.shape:
        raise ShapeMismatch(
            f"target {t_tile.data.shape} vs donor {d_tile.data.shape}"
        )
    if t_mask.values.shape != d_mask.values.shape:
        raise ShapeMismatch(
            f"target mask {t_mask.values.shape} vs donor mask {d_mask.values.shape}"
        )
    fg = d_mask.values.astype(bool)
    data = t_tile.data.copy()
    data[fg] = d_tile.data[fg]
    values = t_mask.values.copy()
    values[fg] = 1
    return (
        Tile(id=t_tile.id, data=data, band_names=t_tile.band_names),
        MaskImage(values=values),
    )


def augment_batch(
    batch: List[Tuple[Tile, Optional[MaskImage]]],
    cfg: AugmentConfig,
    epoch: int = 0,
    indices: Optional[List[int]] = None,
) -> List[Tuple[Tile, Optional[MaskImage]]]:
    """Per-sample rotation then cutmix; donors drawn from the original batch.

    `indices` are the samples' dataset positions (default: position in batch);
    they key the per-sample RNG streams together with (seed, epoch).
    """
    if indices is None:
        indices = list(range(len(batch)))
    if len(indices) != len(batch):
        raise ShapeMismatch("indices length must match batch length")
    donors = [
        i
        for i, (_, m) in enumerate(batch)
        if m is not None and m.values.any()
    ]
    out = []
    for pos, (tile, mask) in enumerate(batch):
        stream = SplitMix64(derive_seed(cfg.rng_seed, epoch, indices[pos]))
        if stream.next_float() < cfg.rotation_prob:
            tile, mask = rotate(tile, mask, ANGLES[stream.randrange(3)])
        if stream.next_float() < cfg.cutmix_prob and donors and mask is not None:
            d_tile, d_mask = batch[donors[stream.randrange(len(donors))]]
            tile, mask = cutmix((tile, mask), (d_tile, d_mask))
        out.append((tile, mask))
    return out
