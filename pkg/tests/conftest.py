"""Shared fixtures: synthetic datasets and the frozen toy training config."""

import dataclasses

import pytest

from rmaunet import AugmentConfig, LossConfig, ModelConfig, TrainConfig
from rmaunet.tile_io import generate_synthetic_dataset


@pytest.fixture(scope="session")
def synth16(tmp_path_factory):
    """The 16-tile seed-7 dataset the overfit benchmark runs on."""
    out = tmp_path_factory.mktemp("synth16")
    return generate_synthetic_dataset(n=16, channels=14, seed=7, out_dir=out)


@pytest.fixture(scope="session")
def synth16_margin0(tmp_path_factory):
    """Signal-free control: same masks, nothing in the pixels predicts them."""
    out = tmp_path_factory.mktemp("synth16_m0")
    return generate_synthetic_dataset(n=16, channels=14, seed=7, out_dir=out, margin=0.0)


@pytest.fixture(scope="session")
def synth4_small(tmp_path_factory):
    """Tiny 32 px dataset for fast trainer/CLI plumbing tests."""
    out = tmp_path_factory.mktemp("synth4")
    return generate_synthetic_dataset(n=4, channels=14, seed=3, out_dir=out, size=32)


def toy_train_config(**overrides) -> TrainConfig:
    """The frozen overfit-benchmark configuration."""
    base = dict(
        epochs=200,
        batch_size=8,
        learning_rate=2e-3,
        seed=7,
        mode="both",
        recipe="none",
        tau=0.5,
        loss=LossConfig(kind="cross_entropy"),
        aug=AugmentConfig(rotation_prob=0.0, cutmix_prob=0.0),
        model=ModelConfig(in_channels=0, base_filters=4, depth=1),
    )
    base.update(overrides)
    return TrainConfig(**base)


def small_train_config(**overrides) -> TrainConfig:
    """Fast config for plumbing tests on the 32 px dataset."""
    cfg = toy_train_config(epochs=2, batch_size=2)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg
