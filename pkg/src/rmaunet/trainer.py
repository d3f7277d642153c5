"""Deterministic training/evaluation loops, checkpointing, run reports.

Config file format: flat key=value lines, '#' comments; nested fields use
dotted keys (loss.alpha, aug.rotation_prob, model.depth). Keys mirror the
TrainConfig/LossConfig/AugmentConfig/ModelConfig fields.

Determinism: model init comes from torch.manual_seed(cfg.seed); the epoch
shuffle comes from SplitMix64(derive_seed(seed, "order", epoch)); per-sample
augmentation streams are keyed by (aug.rng_seed, epoch, dataset index).
Two runs with the same config and data produce identical loss trajectories
and bit-identical checkpoints on one platform.
"""

from __future__ import annotations

import dataclasses
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import bands as bands_mod
from .augment import AugmentConfig, augment_batch
from .core_types import MaskImage, ProbMap, SampleRecord, Tile
from .errors import (
    ChannelMismatch,
    DivergedLoss,
    EmptyTestSplit,
    EmptyTrainSplit,
    ShapeMismatch,
)
from .evaluation import accumulate_confusion, detection_metrics, metrics, threshold
from .losses import LossConfig, detection_loss, multi_head_loss, weight_norm_sq
from .model import ModelConfig, RmauNet, ensemble_masks, save_checkpoint
from .core_types import ConfusionCounts
from .rng import SplitMix64, derive_seed
from .tile_io import Manifest


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    mode: str = "both"  # segmentation | detection | both
    recipe: str = "b15-23"
    tau: float = 0.5
    select_on_test: bool = False
    precision: str = "float32"  # float64 is for gradient-check work
    cache_tiles: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ShapeMismatch("epochs must be >= 1")
        if self.batch_size < 1:
            raise ShapeMismatch("batch_size must be >= 1")
        # zero is allowed so the degenerate no-update contract stays testable
        if self.learning_rate < 0:
            raise ShapeMismatch("learning_rate must be >= 0")
        if self.mode not in ("segmentation", "detection", "both"):
            raise ShapeMismatch(f"bad mode {self.mode!r}")
        if self.recipe not in bands_mod.RECIPE_NAMES:
            raise ShapeMismatch(f"bad recipe {self.recipe!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ShapeMismatch("tau must be in [0,1]")
        if self.precision not in ("float32", "float64"):
            raise ShapeMismatch(f"bad precision {self.precision!r}")


@dataclass
class RunReport:
    epoch_losses: List[float]
    seg_metrics: Optional[Dict[str, float]]
    det_metrics: Optional[Dict[str, float]]
    eval_split: str
    wall_time: float
    config_echo: Dict[str, str]
    checkpoint_path: Optional[str]


# ---------------------------------------------------------------- config io


def _flatten_config(cfg: TrainConfig) -> Dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            prefix = f.name
            for sub in dataclasses.fields(value):
                v = getattr(value, sub.name)
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                out[f"{prefix}.{sub.name}"] = str(v)
        else:
            out[f.name] = str(value)
    # mode lives on TrainConfig; the model copy is derived, not a config key
    out.pop("model.mode", None)
    return out


def save_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        for key, value in _flatten_config(cfg).items():
            fh.write(f"{key}={value}\n")


def _parse_scalar(text: str, target_type):
    if target_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ShapeMismatch(f"bad boolean {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def load_train_config(path) -> TrainConfig:
    kv = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ShapeMismatch(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    return train_config_from_kv(kv)


def train_config_from_kv(kv: Dict[str, str]) -> TrainConfig:
    groups = {"loss": LossConfig, "aug": AugmentConfig, "model": ModelConfig}
    top_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    top_kwargs, group_kwargs = {}, {name: {} for name in groups}
    for key, value in kv.items():
        if "." in key:
            group, sub = key.split(".", 1)
            if group not in groups:
                raise ShapeMismatch(f"unknown config group {group!r}")
            cls = groups[group]
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if sub not in fields:
                raise ShapeMismatch(f"unknown config key {key!r}")
            if sub == "head_resolutions":
                group_kwargs[group][sub] = tuple(int(x) for x in value.split(","))
            else:
                default = getattr(cls(), sub)
                group_kwargs[group][sub] = _parse_scalar(value, type(default))
        else:
            if key not in top_fields:
                raise ShapeMismatch(f"unknown config key {key!r}")
            default = getattr(TrainConfig(), key)
            top_kwargs[key] = _parse_scalar(value, type(default))
    for name, cls in groups.items():
        if group_kwargs[name]:
            top_kwargs[name] = cls(**group_kwargs[name])
    cfg = TrainConfig(**top_kwargs)
    # keep the model's mode in lockstep with the trainer's
    if cfg.model.mode != cfg.mode:
        cfg = dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, mode=cfg.mode)
        )
    return cfg


# ---------------------------------------------------------------- data prep


class _TileStore:
    """Loads, band-expands, and optionally caches (tile, mask, label) triples."""

    def __init__(self, manifest: Manifest, recipe_name: str, cache: bool):
        self.manifest = manifest
        self.recipe_name = recipe_name
        self.cache_enabled = cache
        self.cache: Dict[Tuple, Tuple[Tile, Optional[MaskImage], int]] = {}

    def get(self, record: SampleRecord):
        key = (record.tile_path, record.mask_path)
        if key in self.cache:
            return self.cache[key]
        tile, mask = self.manifest.load_pair(record)
        recipe = bands_mod.make_recipe(self.recipe_name, tile.band_names)
        tile = bands_mod.expand_bands(tile, recipe)
        if record.image_label is not None:
            label = 1 if record.image_label == "landslide" else 0
        else:
            label = 1 if mask is not None and mask.values.any() else 0
        triple = (tile, mask, label)
        if self.cache_enabled:
            self.cache[key] = triple
        return triple


def _batch_tensors(items, dtype):
    tiles = torch.stack(
        [torch.from_numpy(t.data.transpose(2, 0, 1).copy()) for t, _, _ in items]
    ).to(dtype)
    have_mask = [m is not None for _, m, _ in items]
    masks = None
    if any(have_mask):
        h, w = items[0][0].height, items[0][0].width
        rows = []
        for _, m, _ in items:
            if m is None:
                rows.append(torch.zeros(h, w))
            else:
                rows.append(torch.from_numpy(m.values.astype(np.float32)))
        masks = torch.stack(rows).to(dtype)
    weights = torch.tensor([1.0 if hm else 0.0 for hm in have_mask], dtype=dtype)
    labels = torch.tensor([float(lbl) for _, _, lbl in items], dtype=dtype)
    return tiles, masks, weights, labels


def _resolve_model_config(cfg: TrainConfig, sample_tile: Tile) -> ModelConfig:
    model_cfg = dataclasses.replace(cfg.model, mode=cfg.mode)
    if model_cfg.in_channels == 0:
        # auto mode: adopt the expanded tile's channel count and size
        size = sample_tile.height
        model_cfg = dataclasses.replace(
            model_cfg,
            in_channels=sample_tile.channels,
            head_resolutions=(2 * size, size, size // 2),
        )
    if model_cfg.in_channels != sample_tile.channels:
        raise ChannelMismatch(
            f"model wants {model_cfg.in_channels} channels, tiles have "
            f"{sample_tile.channels} after recipe {cfg.recipe!r}"
        )
    if model_cfg.input_size != sample_tile.height:
        raise ShapeMismatch(
            f"model wants {model_cfg.input_size} px tiles, got {sample_tile.height}"
        )
    return model_cfg


# ---------------------------------------------------------------- training


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed & 0xFFFFFFFF)
    torch.manual_seed(seed)


def _selection_f1(model, store, records, cfg) -> float:
    result = _evaluate_records(model, store, records, cfg)
    if cfg.mode == "detection":
        return result["detection"]["f1"]
    return result["segmentation"]["f1"]


def train(
    manifest: Manifest, cfg: TrainConfig, out_dir=None
) -> Tuple[RmauNet, RunReport]:
    t_start = time.time()
    train_records = manifest.subset("train")
    if not train_records:
        raise EmptyTrainSplit("manifest has no train records")
    val_records = manifest.subset("val")
    test_records = manifest.subset("test")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    store = _TileStore(manifest, cfg.recipe, cfg.cache_tiles)
    first_tile, _, _ = store.get(train_records[0])
    model_cfg = _resolve_model_config(cfg, first_tile)

    _seed_everything(cfg.seed)
    model = RmauNet(model_cfg)
    dtype = torch.float64 if cfg.precision == "float64" else torch.float32
    if dtype is torch.float64:
        model.double()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_epsilon,
    )

    use_seg = cfg.mode in ("segmentation", "both")
    use_det = cfg.mode in ("detection", "both")
    select_records = None
    if val_records:
        select_records = val_records
    elif cfg.select_on_test and test_records:
        select_records = test_records

    epoch_losses: List[float] = []
    best_f1 = -1.0
    last_path = out_dir / "last.rmck" if out_dir is not None else None
    best_path = out_dir / "best.rmck" if out_dir is not None else None
    wrote_best = False

    for epoch in range(cfg.epochs):
        model.train()
        order = list(range(len(train_records)))
        SplitMix64(derive_seed(cfg.seed, "order", epoch)).shuffle(order)
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start : start + cfg.batch_size]
            raw = [store.get(train_records[i]) for i in chosen]
            pairs = [(t, m) for t, m, _ in raw]
            pairs = augment_batch(pairs, cfg.aug, epoch=epoch, indices=chosen)
            items = [
                (tile, mask, raw[k][2]) for k, (tile, mask) in enumerate(pairs)
            ]
            tiles, masks, weights, labels = _batch_tensors(items, dtype)

            out = model(tiles)
            loss = None
            if use_seg and masks is not None:
                theta = weight_norm_sq(model) if cfg.loss.kind == "cross_entropy" else 0.0
                loss = multi_head_loss(
                    out["masks"], masks, cfg.loss, theta_norm_sq=theta, weights=weights
                )
            if use_det:
                det = detection_loss(out["detect_logit"], labels)
                loss = det if loss is None else loss + det
            if loss is None:
                raise EmptyTrainSplit(
                    f"no usable supervision for mode {cfg.mode!r} in this manifest"
                )
            if not torch.isfinite(loss):
                raise DivergedLoss(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.batch_size}"
                    + (f"; last good checkpoint: {last_path}" if epoch and last_path else "")
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(batch_losses)))

        if last_path is not None:
            save_checkpoint(model, last_path)
        if select_records and best_path is not None:
            f1 = _selection_f1(model, store, select_records, cfg)
            if f1 > best_f1:
                best_f1 = f1
                save_checkpoint(model, best_path)
                wrote_best = True

    # final metrics: test split when present, else the training split
    eval_split, eval_records = ("test", test_records) if test_records else (
        "train",
        train_records,
    )
    result = _evaluate_records(model, store, eval_records, cfg)
    report = RunReport(
        epoch_losses=epoch_losses,
        seg_metrics=result["segmentation"] if use_seg else None,
        det_metrics=result["detection"] if use_det else None,
        eval_split=eval_split,
        wall_time=time.time() - t_start,
        config_echo=_flatten_config(cfg),
        checkpoint_path=str(best_path if wrote_best else last_path)
        if out_dir is not None
        else None,
    )
    if out_dir is not None:
        _write_report(report, out_dir)
    return model, report


def _write_report(report: RunReport, out_dir: Path) -> None:
    with open(out_dir / "loss_curve.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(report.epoch_losses, 1):
            fh.write(f"{i},{loss:.8f}\n")
    with open(out_dir / "report.txt", "w") as fh:
        fh.write(format_report(report))


def format_report(report: RunReport) -> str:
    lines = [
        f"wall_time_s={report.wall_time:.2f}",
        f"epochs={len(report.epoch_losses)}",
        f"final_train_loss={report.epoch_losses[-1]:.6f}" if report.epoch_losses else "",
        f"eval_split={report.eval_split}",
    ]
    if report.seg_metrics:
        for k, v in report.seg_metrics.items():
            lines.append(f"segmentation.{k}={100 * v:.2f}")
    if report.det_metrics:
        for k, v in report.det_metrics.items():
            lines.append(f"detection.{k}={100 * v:.2f}")
    if report.checkpoint_path:
        lines.append(f"checkpoint={report.checkpoint_path}")
    lines.append("")
    lines.append("[config]")
    for k, v in sorted(report.config_echo.items()):
        lines.append(f"{k}={v}")
    return "\n".join(line for line in lines if line != "") + "\n"


# ---------------------------------------------------------------- evaluation


def _forward_probs(model: RmauNet, tiles: torch.Tensor):
    model.eval()
    with torch.no_grad():
        out = model(tiles)
    mids = sorted(out["masks"])  # lo, mid, hi
    per_image = []
    for b in range(tiles.shape[0]):
        per_image.append(
            ensemble_masks({res: out["masks"][res][b].numpy() for res in mids})
        )
    return per_image, out["detect_logit"].numpy()


def _evaluate_records(model: RmauNet, store: _TileStore, records, cfg: TrainConfig):
    dtype = next(model.parameters()).dtype
    seg_counts = ConfusionCounts()
    logits, labels = [], []
    seg_seen = False
    for start in range(0, len(records), cfg.batch_size):
        chunk = records[start : start + cfg.batch_size]
        raw = [store.get(r) for r in chunk]
        tiles, _, _, _ = _batch_tensors(raw, dtype)
        probs, det = _forward_probs(model, tiles)
        for (tile, mask, label), prob in zip(raw, probs):
            if mask is not None:
                pred = threshold(prob, cfg.tau)
                seg_counts = accumulate_confusion(pred, mask, seg_counts)
                seg_seen = True
        logits.extend(float(z) for z in det)
        labels.extend(int(lbl) for _, _, lbl in raw)
    return {
        "segmentation": metrics(seg_counts) if seg_seen else None,
        "detection": detection_metrics(logits, labels),
        "n_samples": len(records),
    }


def evaluate(model: RmauNet, manifest: Manifest, cfg: TrainConfig, split: str = "test"):
    """Metrics over one split; never mutates model parameters."""
    records = manifest.subset(split)
    if not records:
        raise EmptyTestSplit(f"manifest has no {split!r} records")
    store = _TileStore(manifest, cfg.recipe, cfg.cache_tiles)
    return _evaluate_records(model, store, records, cfg)


def predict(model: RmauNet, tile: Tile, recipe_name: str = "b15-23", tau: float = 0.5):
    """Single-tile inference: (ProbMap, MaskImage, detect_prob)."""
    recipe = bands_mod.make_recipe(recipe_name, tile.band_names)
    expanded = bands_mod.expand_bands(tile, recipe)
    if expanded.channels != model.cfg.in_channels:
        raise ChannelMismatch(
            f"model wants {model.cfg.in_channels} channels, tile has "
            f"{expanded.channels} after recipe {recipe_name!r}"
        )
    dtype = next(model.parameters()).dtype
    tiles = torch.from_numpy(expanded.data.transpose(2, 0, 1).copy()).unsqueeze(0).to(dtype)
    probs, det = _forward_probs(model, tiles)
    prob = ProbMap(values=probs[0])
    pred = threshold(prob, tau)
    detect_prob = float(1.0 / (1.0 + np.exp(-det[0])))
    return prob, pred, detect_prob
