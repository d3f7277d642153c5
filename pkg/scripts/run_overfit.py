"""Run the desk-scale overfit benchmark and print its checklist verdict.

Generates the 16-tile synthetic dataset, trains the depth-1 toy model for
200 epochs on CPU, and evaluates on the training split. With --control it
repeats the run on a signal-free copy of the dataset (margin 0) to show
the benchmark measures learning rather than leakage. Takes a couple of
minutes per run on one core.
"""

import argparse
import sys
import time
from pathlib import Path

from rmaunet import AugmentConfig, LossConfig, ModelConfig, TrainConfig
from rmaunet.tile_io import generate_synthetic_dataset
from rmaunet.trainer import format_report, train


def toy_config(seed: int) -> TrainConfig:
    # Frozen benchmark configuration; tests/test_acceptance.py pins the same one.
    return TrainConfig(
        epochs=200,
        batch_size=8,
        learning_rate=2e-3,
        seed=seed,
        mode="both",
        recipe="none",
        tau=0.5,
        loss=LossConfig(kind="cross_entropy"),
        aug=AugmentConfig(rotation_prob=0.0, cutmix_prob=0.0),
        model=ModelConfig(in_channels=0, base_filters=4, depth=1),
    )


def run_once(out: Path, seed: int, margin: float, tag: str) -> dict:
    data = out / f"data_{tag}"
    manifest = generate_synthetic_dataset(
        n=16, channels=14, seed=seed, out_dir=data, margin=margin
    )
    t0 = time.perf_counter()
    _, report = train(manifest, toy_config(seed), out_dir=out / f"run_{tag}")
    wall = time.perf_counter() - t0
    print(f"--- {tag} (margin={margin}, {wall:.0f}s) ---")
    print(format_report(report))
    return report.seg_metrics


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("overfit_run"))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument(
        "--control",
        action="store_true",
        help="also train on a margin-0 dataset; its F1 must stay low",
    )
    args = parser.parse_args(argv)

    seg = run_once(args.out, args.seed, margin=0.35, tag="signal")
    ok = seg["f1"] >= 0.95
    print(f"{'PASS' if ok else 'FAIL'} overfit: train F1={seg['f1']:.4f} (target >=0.95)")

    if args.control:
        ctl = run_once(args.out, args.seed, margin=0.0, tag="control")
        ctl_ok = ctl["f1"] < 0.5
        ok = ok and ctl_ok
        print(
            f"{'PASS' if ctl_ok else 'FAIL'} control: "
            f"train F1={ctl['f1']:.4f} (must stay <0.5)"
        )
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
