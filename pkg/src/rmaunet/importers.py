"""Adapters normalizing the three public datasets into tile/mask/manifest form.

Assumed source layouts (documented, since the archives ship unstructured):

  landslide4sense: <src>/img/image_*.h5 with dataset key "img" (H, W, 14),
      <src>/mask/mask_*.h5 with key "mask" (H, W). Pairing replaces the
      "image" stem prefix with "mask". Split: 80:20 by seeded shuffle.
  bijie: <src>/landslide/img/*.png with <src>/landslide/mask/<same name>.png,
      <src>/non-landslide/img/*.png (no masks). RGB converted to float in
      [0, 1]; channels take the B4, B3, B2 roles. Split: 70:30.
  nepal: <src>/{train,val,test}/img/*.png and .../mask/*.png; the provided
      split assignment is kept as-is.

Band values are preserved verbatim; scaling is band_engineering's job.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import h5py
import numpy as np
from PIL import Image

from .core_types import MaskImage, SampleRecord, Tile, validate_pair
from .errors import IoFailure, ShapeMismatch
from .tile_io import (
    Manifest,
    default_band_names,
    save_manifest,
    save_mask,
    save_tile,
    split_dataset,
)

L4S_SPLIT_RATIO = 0.8
BIJIE_SPLIT_RATIO = 0.7


def _write_pair(
    out_dir: Path,
    stem: str,
    data: np.ndarray,
    mask: Optional[np.ndarray],
    label: Optional[str],
    split: str,
) -> SampleRecord:
    band_names = default_band_names(data.shape[2])
    tile = Tile(id=stem, data=data.astype(np.float32), band_names=band_names)
    tile_name = f"{stem}.rst"
    mask_name = None
    if mask is not None:
        mask_img = MaskImage(values=(mask > 0).astype(np.uint8))
        validate_pair(tile, mask_img)
        mask_name = f"{stem}_mask.rst"
        save_mask(mask_img, out_dir / mask_name)
        if label is None:
            label = "landslide" if mask_img.values.any() else "none"
    save_tile(tile, out_dir / tile_name)
    return SampleRecord(
        tile_path=tile_name, mask_path=mask_name, image_label=label, split=split
    )


def _load_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert(mode))


def import_landslide4sense(src, out, seed: int = 0) -> Manifest:
    src, out = Path(src), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    img_files = sorted((src / "img").glob("*.h5"))
    if not img_files:
        raise IoFailure(f"no .h5 files under {src / 'img'}")
    records: List[SampleRecord] = []
    for img_path in img_files:
        mask_path = src / "mask" / f"{img_path.stem.replace('image', 'mask')}.h5"
        if not mask_path.exists():
            raise IoFailure(f"missing mask file {mask_path}")
        with h5py.File(img_path, "r") as fh:
            data = np.asarray(fh["img"], dtype=np.float32)
        with h5py.File(mask_path, "r") as fh:
            mask = np.asarray(fh["mask"])
        if data.ndim != 3:
            raise ShapeMismatch(f"{img_path}: expected (H, W, C), got {data.shape}")
        records.append(_write_pair(out, img_path.stem, data, mask, None, "train"))
    manifest = Manifest(records=records, source_name="landslide4sense", root=out)
    train, test = split_dataset(manifest, L4S_SPLIT_RATIO, seed)
    manifest = Manifest(
        records=train.records + test.records, source_name="landslide4sense", root=out
    )
    save_manifest(manifest, out / "manifest.csv")
    return manifest


def import_bijie(src, out, seed: int = 0) -> Manifest:
    src, out = Path(src), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records: List[SampleRecord] = []
    ls_imgs = sorted((src / "landslide" / "img").glob("*.png"))
    bg_imgs = sorted((src / "non-landslide" / "img").glob("*.png"))
    if not ls_imgs and not bg_imgs:
        raise IoFailure(f"no .png files under {src}/landslide/img or non-landslide/img")
    for img_path in ls_imgs:
        mask_path = src / "landslide" / "mask" / img_path.name
        if not mask_path.exists():
            raise IoFailure(f"missing mask file {mask_path}")
        data = _load_png(img_path, "RGB").astype(np.float32) / 255.0
        mask = _load_png(mask_path, "L")
        records.append(
            _write_pair(out, f"ls_{img_path.stem}", data, mask, "landslide", "train")
        )
    for img_path in bg_imgs:
        data = _load_png(img_path, "RGB").astype(np.float32) / 255.0
        records.append(
            _write_pair(out, f"bg_{img_path.stem}", data, None, "none", "train")
        )
    manifest = Manifest(records=records, source_name="bijie", root=out)
    train, test = split_dataset(manifest, BIJIE_SPLIT_RATIO, seed)
    manifest = Manifest(
        records=train.records + test.records, source_name="bijie", root=out
    )
    save_manifest(manifest, out / "manifest.csv")
    return manifest


def import_nepal(src, out, seed: int = 0) -> Manifest:
    src, out = Path(src), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records: List[SampleRecord] = []
    for split in ("train", "val", "test"):
        for img_path in sorted((src / split / "img").glob("*.png")):
            mask_path = src / split / "mask" / img_path.name
            if not mask_path.exists():
                raise IoFailure(f"missing mask file {mask_path}")
            data = _load_png(img_path, "RGB").astype(np.float32) / 255.0
            mask = _load_png(mask_path, "L")
            records.append(
                _write_pair(out, f"{split}_{img_path.stem}", data, mask, None, split)
            )
    if not records:
        raise IoFailure(f"no .png files under {src}/{{train,val,test}}/img")
    manifest = Manifest(records=records, source_name="nepal", root=out)
    save_manifest(manifest, out / "manifest.csv")
    return manifest


IMPORTERS = {
    "landslide4sense": import_landslide4sense,
    "bijie": import_bijie,
    "nepal": import_nepal,
}
