"""Tile/mask serialization, manifest CSV, dataset splitting, synthetic fixtures.

Tile file format (bit-exact contract):
    magic b"RST1", then little-endian u32 fields
    version=1, height, width, channels, dtype (0 = float32 raster, 1 = uint8 mask),
    then raw row-major payload.

Manifest format: CSV with header `tile_path,mask_path,image_label,split`;
empty cells mean absent; paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .core_types import MaskImage, SampleRecord, Tile, validate_pair
from .errors import (
    BadMagic,
    EmptyManifest,
    IoFailure,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)
from .rng import SplitMix64

MAGIC = b"RST1"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1


def default_band_names(channels: int) -> tuple:
    """Band names reconstructed by convention; the wire format stores none.

    14 channels = the full multispectral stack B1..B14; 3 channels = an RGB
    tile whose channels play the B4, B3, B2 roles; anything else is generic.
    """
    if channels == 14:
        return tuple(f"B{i}" for i in range(1, 15))
    if channels == 3:
        return ("B4", "B3", "B2")
    return tuple(f"B{i}" for i in range(1, channels + 1))


def _write_header(fh, height, width, channels, dtype_code):
    fh.write(MAGIC)
    fh.write(struct.pack("<5I", VERSION, height, width, channels, dtype_code))


def _read_header(fh, path):
    magic = fh.read(4)
    if magic != MAGIC:
        raise BadMagic(f"{path}: expected {MAGIC!r}, got {magic!r}")
    raw = fh.read(20)
    if len(raw) != 20:
        raise TruncatedFile(f"{path}: header cut short")
    version, height, width, channels, dtype_code = struct.unpack("<5I", raw)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    if dtype_code not in (DTYPE_F32, DTYPE_U8):
        raise UnsupportedVersion(f"{path}: dtype code {dtype_code}")
    return height, width, channels, dtype_code


def save_tile(tile: Tile, path) -> None:
    path = Path(path)
    data = np.ascontiguousarray(tile.data, dtype="<f4")
    with open(path, "wb") as fh:
        _write_header(fh, tile.height, tile.width, tile.channels, DTYPE_F32)
        fh.write(data.tobytes())


def load_tile(path) -> Tile:
    path = Path(path)
    with open(path, "rb") as fh:
        height, width, channels, dtype_code = _read_header(fh, path)
        if dtype_code != DTYPE_F32:
            raise UnsupportedVersion(f"{path}: not a float raster")
        want = height * width * channels * 4
        raw = fh.read(want + 1)
    if len(raw) < want:
        raise TruncatedFile(f"{path}: payload {len(raw)} bytes, want {want}")
    if len(raw) > want:
        raise TruncatedFile(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(height, width, channels)
    return Tile(id=path.stem, data=data.copy(), band_names=default_band_names(channels))


def save_mask(mask: MaskImage, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        _write_header(fh, mask.height, mask.width, 1, DTYPE_U8)
        fh.write(np.ascontiguousarray(mask.values, dtype=np.uint8).tobytes())


def load_mask(path) -> MaskImage:
    path = Path(path)
    with open(path, "rb") as fh:
        height, width, channels, dtype_code = _read_header(fh, path)
        if dtype_code != DTYPE_U8 or channels != 1:
            raise UnsupportedVersion(f"{path}: not a mask file")
        want = height * width
        raw = fh.read(want + 1)
    if len(raw) < want:
        raise TruncatedFile(f"{path}: payload {len(raw)} bytes, want {want}")
    if len(raw) > want:
        raise TruncatedFile(f"{path}: trailing bytes after payload")
    values = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return MaskImage(values=values.copy())


@dataclass
class Manifest:
    """Ordered sample records; paths resolve against `root`."""

    records: List[SampleRecord]
    source_name: str = "unknown"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> List[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def load_pair(self, record: SampleRecord) -> Tuple[Tile, Optional[MaskImage]]:
        tile = load_tile(self.root / record.tile_path)
        mask = None
        if record.mask_path is not None:
            mask = load_mask(self.root / record.mask_path)
            validate_pair(tile, mask)
        return tile, mask


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_path", "mask_path", "image_label", "split"])
        for r in manifest.records:
            writer.writerow(
                [r.tile_path, r.mask_path or "", r.image_label or "", r.split]
            )


def load_manifest(path, source_name: str = "unknown") -> Manifest:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tile_path", "mask_path", "image_label", "split"]:
            raise BadMagic(f"{path}: bad manifest header {header}")
        for row in reader:
            if not row:
                continue
            tile_path, mask_path, image_label, split = row
            records.append(
                SampleRecord(
                    tile_path=tile_path,
                    mask_path=mask_path or None,
                    image_label=image_label or None,
                    split=split,
                )
            )
    if not records:
        raise EmptyManifest(f"{path}: no records")
    return Manifest(records=records, source_name=source_name, root=path.parent)


def _replace_split(record: SampleRecord, split: str) -> SampleRecord:
    return SampleRecord(
        tile_path=record.tile_path,
        mask_path=record.mask_path,
        image_label=record.image_label,
        split=split,
    )


def split_dataset(manifest: Manifest, ratio: float, seed: int) -> Tuple[Manifest, Manifest]:
    """Deterministic shuffle + split; |train| = round(ratio * n), ties up."""
    if not 0.0 < ratio < 1.0:
        raise ShapeMismatch(f"ratio must be in (0,1), got {ratio}")
    n = len(manifest.records)
    if n == 0:
        raise EmptyManifest("cannot split an empty manifest")
    order = list(range(n))
    SplitMix64(seed).shuffle(order)
    n_train = int(math.floor(ratio * n + 0.5))
    train = [_replace_split(manifest.records[i], "train") for i in order[:n_train]]
    test = [_replace_split(manifest.records[i], "test") for i in order[n_train:]]
    return (
        Manifest(train, manifest.source_name, manifest.root),
        Manifest(test, manifest.source_name, manifest.root),
    )


def _rasterize_ellipses(rng: np.random.Generator, size: int) -> np.ndarray:
    """Union of 1-3 random rotated ellipses as a uint8 mask."""
    mask = np.zeros((size, size), dtype=np.uint8)
    rr, cc = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, size=2)
        a, b = rng.uniform(6, 16, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = rr - cy, cc - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    return mask


def generate_synthetic_dataset(
    n: int,
    channels: int,
    seed: int,
    out_dir,
    size: int = 128,
    margin: float = 0.35,
) -> Manifest:
    """Emit n tile/mask pairs with an ellipse-shaped class signal.

    Landslide pixels shift the B4 and B11 analog bands up and the B8 analog
    down by `margin`; margin=0 produces a signal-free control set where the
    masks exist but nothing in the pixels predicts them.
    """
    if n < 1:
        raise ShapeMismatch("n must be >= 1")
    if channels not in (3, 14):
        raise ShapeMismatch(f"channels must be 3 or 14, got {channels}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    band_names = default_band_names(channels)
    # bands that carry the class signal, by role
    up = [i for i, b in enumerate(band_names) if b in ("B4", "B11")]
    down = [i for i, b in enumerate(band_names) if b == "B8"]

    rng = np.random.default_rng(seed)
    records = []
    try:
        for idx in range(n):
            positive = rng.random() < 0.75
            mask_arr = (
                _rasterize_ellipses(rng, size)
                if positive
                else np.zeros((size, size), dtype=np.uint8)
            )
            base = rng.uniform(0.2, 0.6, size=channels)
            data = base[None, None, :] + rng.normal(0.0, 0.1, size=(size, size, channels))
            fg = mask_arr.astype(bool)
            for ch in up:
                data[fg, ch] += margin
            for ch in down:
                data[fg, ch] -= margin
            data = np.clip(data, 0.0, 1.0).astype(np.float32)

            tile_name = f"tile_{idx:04d}.rst"
            mask_name = f"mask_{idx:04d}.rst"
            save_tile(Tile(id=f"tile_{idx:04d}", data=data, band_names=band_names),
                      out_dir / tile_name)
            save_mask(MaskImage(values=mask_arr), out_dir / mask_name)
            records.append(
                SampleRecord(
                    tile_path=tile_name,
                    mask_path=mask_name,
                    image_label="landslide" if mask_arr.any() else "none",
                    split="train",
                )
            )
    except OSError as exc:
        raise IoFailure(f"write failed under {out_dir}: {exc}") from exc

    manifest = Manifest(records=records, source_name="synthetic", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
