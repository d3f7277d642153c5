"""Landslide segmentation/detection pipeline: band engineering, augmentation,
a residual multi-axis attention U-Net with multi-resolution heads, combined
focal+IoU training, and threshold-based evaluation."""

__version__ = "0.1.0"

from .core_types import (
    ConfusionCounts,
    MaskImage,
    ProbMap,
    SampleRecord,
    Tile,
    validate_pair,
)
from .tile_io import (
    Manifest,
    generate_synthetic_dataset,
    load_manifest,
    load_mask,
    load_tile,
    save_manifest,
    save_mask,
    save_tile,
    split_dataset,
)
from .bands import BandRecipe, expand_bands, make_recipe
from .augment import AugmentConfig, augment_batch, cutmix, rotate
from .model import (
    ModelConfig,
    RmauNet,
    ensemble_masks,
    load_checkpoint,
    save_checkpoint,
)
from .losses import LossConfig
from .evaluation import (
    accumulate_confusion,
    detection_metrics,
    metrics,
    threshold,
    threshold_sweep,
)
from .trainer import RunReport, TrainConfig, evaluate, predict, train
