import dataclasses
import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

import rmaunet.trainer as trainer_mod
from rmaunet.augment import AugmentConfig
from rmaunet.core_types import SampleRecord
from rmaunet.errors import (
    ChannelMismatch,
    DivergedLoss,
    EmptyTestSplit,
    EmptyTrainSplit,
    ShapeMismatch,
)
from rmaunet.losses import LossConfig
from rmaunet.model import ModelConfig
from rmaunet.tile_io import Manifest, split_dataset
from rmaunet.trainer import (
    TrainConfig,
    evaluate,
    format_report,
    load_train_config,
    predict,
    save_train_config,
    train,
    train_config_from_kv,
)

from conftest import small_train_config, toy_train_config


def _with_test_split(manifest, ratio=0.5, seed=0):
    train_m, test_m = split_dataset(manifest, ratio, seed)
    return Manifest(
        records=train_m.records + test_m.records,
        source_name=manifest.source_name,
        root=manifest.root,
    )


def _state_digest(model) -> str:
    blob = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        blob.update(name.encode())
        blob.update(tensor.detach().cpu().numpy().tobytes())
    return blob.hexdigest()


# ---------------------------------------------------------------- config io


def test_train_config_file_roundtrip(tmp_path):
    cfg = small_train_config(
        learning_rate=0.5,
        mode="segmentation",
        select_on_test=True,
        loss=LossConfig(kind="focal", alpha=0.25),
        aug=AugmentConfig(rotation_prob=0.9, cutmix_prob=0.1, rng_seed=11),
        model=ModelConfig(
            in_channels=14, base_filters=8, depth=2, head_resolutions=(64, 32, 16)
        ),
    )
    path = tmp_path / "run.cfg"
    save_train_config(cfg, path)
    back = load_train_config(path)
    # model.mode is derived from the top-level mode on load
    assert back == dataclasses.replace(
        cfg, model=dataclasses.replace(cfg.model, mode=cfg.mode)
    )


def test_train_config_kv_parsing():
    cfg = train_config_from_kv(
        {
            "epochs": "5",
            "learning_rate": "0.01",
            "select_on_test": "true",
            "mode": "detection",
            "model.head_resolutions": "64,32,16",
            "model.in_channels": "14",
            "loss.kind": "tversky",
            "aug.rotation_prob": "0",
        }
    )
    assert cfg.epochs == 5
    assert cfg.learning_rate == 0.01
    assert cfg.select_on_test is True
    assert cfg.model.head_resolutions == (64, 32, 16)
    assert cfg.model.mode == "detection"
    assert cfg.loss.kind == "tversky"
    assert cfg.aug.rotation_prob == 0.0


def test_train_config_rejects_unknown_key():
    with pytest.raises(ShapeMismatch):
        train_config_from_kv({"momentum": "0.9"})
    with pytest.raises(ShapeMismatch):
        train_config_from_kv({"loss.weight": "1"})


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(epochs=0),
        dict(batch_size=0),
        dict(learning_rate=-1e-3),
        dict(mode="pixel"),
        dict(recipe="b1-99"),
        dict(tau=1.5),
        dict(precision="float16"),
    ],
)
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ShapeMismatch):
        small_train_config(**kwargs)


# ----------------------------------------------------------------- training


def test_zero_learning_rate_never_updates_parameters(synth4_small):
    short, _ = train(synth4_small, small_train_config(learning_rate=0.0, epochs=1))
    longer, _ = train(synth4_small, small_train_config(learning_rate=0.0, epochs=3))
    for (name, a), (_, b) in zip(short.named_parameters(), longer.named_parameters()):
        assert torch.equal(a, b), name


def test_train_writes_run_artifacts(synth4_small, tmp_path):
    model, report = train(synth4_small, small_train_config(), out_dir=tmp_path)
    assert (tmp_path / "last.rmck").exists()
    assert (tmp_path / "report.txt").exists()
    curve = (tmp_path / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,loss"
    assert len(curve) == 1 + len(report.epoch_losses) == 3
    assert report.eval_split == "train"  # no test split in the tiny manifest
    assert report.checkpoint_path == str(tmp_path / "last.rmck")


def test_train_report_metrics_follow_mode(synth4_small):
    _, seg = train(synth4_small, small_train_config(epochs=1, mode="segmentation"))
    assert seg.seg_metrics is not None and seg.det_metrics is None
    _, det = train(synth4_small, small_train_config(epochs=1, mode="detection"))
    assert det.seg_metrics is None and det.det_metrics is not None
    _, both = train(synth4_small, small_train_config(epochs=1))
    assert both.seg_metrics is not None and both.det_metrics is not None


def test_train_empty_train_split_raises(synth4_small):
    test_only = Manifest(
        records=[dataclasses.replace(r, split="test") for r in synth4_small.records],
        source_name="synthetic",
        root=synth4_small.root,
    )
    with pytest.raises(EmptyTrainSplit):
        train(test_only, small_train_config())


def test_train_segmentation_without_masks_raises(synth4_small):
    label_only = Manifest(
        records=[
            SampleRecord(
                tile_path=r.tile_path,
                mask_path=None,
                image_label=r.image_label,
                split="train",
            )
            for r in synth4_small.records
        ],
        source_name="synthetic",
        root=synth4_small.root,
    )
    with pytest.raises(EmptyTrainSplit):
        train(label_only, small_train_config(epochs=1, mode="segmentation"))


def test_train_detection_works_without_masks(synth4_small):
    label_only = Manifest(
        records=[
            SampleRecord(
                tile_path=r.tile_path,
                mask_path=None,
                image_label=r.image_label,
                split="train",
            )
            for r in synth4_small.records
        ],
        source_name="synthetic",
        root=synth4_small.root,
    )
    _, report = train(label_only, small_train_config(epochs=1, mode="detection"))
    assert report.det_metrics is not None


def test_train_diverged_loss_aborts(synth4_small, monkeypatch):
    poisoned = lambda *a, **k: torch.tensor(float("nan"), requires_grad=True)
    monkeypatch.setattr(trainer_mod, "multi_head_loss", poisoned)
    with pytest.raises(DivergedLoss):
        train(synth4_small, small_train_config(epochs=1, mode="segmentation"))


def test_train_select_on_test_writes_best(synth4_small, tmp_path):
    manifest = _with_test_split(synth4_small)
    _, report = train(
        manifest,
        small_train_config(select_on_test=True),
        out_dir=tmp_path,
    )
    assert (tmp_path / "best.rmck").exists()
    assert report.checkpoint_path == str(tmp_path / "best.rmck")
    assert report.eval_split == "test"


def test_train_mismatched_model_channels_raise(synth4_small):
    cfg = small_train_config(
        model=ModelConfig(
            in_channels=23, base_filters=4, depth=1, head_resolutions=(64, 32, 16)
        )
    )
    with pytest.raises(ChannelMismatch):
        train(synth4_small, cfg)  # recipe none leaves 14 channels


# --------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def quick_run(synth4_small):
    """One cheap trained model shared by the evaluation-side tests."""
    cfg = small_train_config()
    model, report = train(synth4_small, cfg)
    return model, cfg, synth4_small


def test_evaluate_twice_identical_and_no_mutation(quick_run):
    model, cfg, manifest = quick_run
    before = _state_digest(model)
    a = evaluate(model, manifest, cfg, split="train")
    b = evaluate(model, manifest, cfg, split="train")
    assert a == b
    assert _state_digest(model) == before


def test_evaluate_empty_split_raises(quick_run):
    model, cfg, manifest = quick_run
    with pytest.raises(EmptyTestSplit):
        evaluate(model, manifest, cfg, split="val")


def test_checkpoint_roundtrip_reproduces_metrics(synth4_small, tmp_path):
    cfg = small_train_config()
    model, _ = train(synth4_small, cfg, out_dir=tmp_path)
    from rmaunet.model import load_checkpoint

    back = load_checkpoint(tmp_path / "last.rmck")
    assert evaluate(back, synth4_small, cfg, split="train") == evaluate(
        model, synth4_small, cfg, split="train"
    )


def test_forced_full_positive_prediction_metrics(synth16):
    # Surgery: zero every conv, set every BN to gamma=0/beta=20 so each block
    # emits a large constant and every head saturates at probability ~1.
    cfg = small_train_config(learning_rate=0.0, epochs=1, batch_size=8)
    model, _ = train(synth16, cfg)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (torch.nn.Conv2d, torch.nn.Linear)):
                mod.weight.zero_()
                if mod.bias is not None:
                    mod.bias.zero_()
            if isinstance(mod, torch.nn.BatchNorm2d):
                mod.weight.zero_()
                mod.bias.fill_(20.0)
    result = evaluate(model, synth16, cfg, split="train")
    seg = result["segmentation"]

    positives = total = 0
    for record in synth16.records:
        _, mask = synth16.load_pair(record)
        positives += mask.positive_count()
        total += mask.height * mask.width
    assert seg["recall"] == 1.0
    assert abs(seg["precision"] - positives / total) < 1e-12


def test_evaluate_counts_samples(quick_run):
    model, cfg, manifest = quick_run
    assert evaluate(model, manifest, cfg, split="train")["n_samples"] == 4


# ------------------------------------------------------------------ predict


def test_predict_contract_and_determinism(quick_run):
    model, cfg, manifest = quick_run
    tile, _ = manifest.load_pair(manifest.records[0])
    prob1, mask1, det1 = predict(model, tile, recipe_name="none", tau=0.5)
    prob2, mask2, det2 = predict(model, tile, recipe_name="none", tau=0.5)
    assert np.array_equal(prob1.values, prob2.values)
    assert np.array_equal(mask1.values, mask2.values)
    assert det1 == det2
    assert prob1.values.min() >= 0.0 and prob1.values.max() <= 1.0
    assert set(np.unique(mask1.values)) <= {0, 1}
    assert 0.0 <= det1 <= 1.0
    assert prob1.values.shape == (32, 32)


def test_predict_mask_is_thresholded_prob(quick_run):
    model, cfg, manifest = quick_run
    tile, _ = manifest.load_pair(manifest.records[1])
    prob, mask, _ = predict(model, tile, recipe_name="none", tau=0.3)
    assert np.array_equal(mask.values, (prob.values >= 0.3).astype(np.uint8))


def test_predict_rejects_wrong_recipe_channels(quick_run):
    model, cfg, manifest = quick_run
    tile, _ = manifest.load_pair(manifest.records[0])
    with pytest.raises(ChannelMismatch):
        predict(model, tile, recipe_name="b15-23")  # 23 channels vs 14-ch model


# ------------------------------------------------------------------- report


def test_format_report_scales_metrics_by_100(quick_run):
    model, cfg, manifest = quick_run
    _, report = train(manifest, small_train_config(epochs=1))
    text = format_report(report)
    assert "segmentation.f1=" in text
    assert "detection.accuracy=" in text
    assert "[config]" in text
    f1 = report.seg_metrics["f1"]
    assert f"segmentation.f1={100 * f1:.2f}" in text


def test_shipped_overfit_config_matches_benchmark():
    # configs/overfit.cfg must stay in lockstep with the frozen toy config
    # the acceptance benchmark and scripts/run_overfit.py both pin.
    path = Path(__file__).parent.parent / "configs" / "overfit.cfg"
    assert load_train_config(path) == toy_train_config()
