"""Train the full-size model on an imported dataset and sweep thresholds.

Expects a directory produced by `rmaunet import` (manifest.csv plus tiles).
The defaults reproduce the reference configuration: 30 epochs, focal+IoU
loss, the 23-band recipe, evaluation at tau 0.95. This is hours of work on
CPU; a GPU build of torch is strongly advised.
"""

import argparse
import sys
from pathlib import Path

from rmaunet import TrainConfig
from rmaunet.evaluation import SWEEP_TAUS, threshold_sweep
from rmaunet.tile_io import load_manifest
from rmaunet.trainer import format_report, predict, train


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", type=Path, required=True)
    parser.add_argument("--out", type=Path, default=Path("full_scale_run"))
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--recipe", default="b15-23")
    parser.add_argument("--tau", type=float, default=0.95)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    manifest = load_manifest(args.data / "manifest.csv")
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        recipe=args.recipe,
        tau=args.tau,
        seed=args.seed,
    )
    model, report = train(manifest, cfg, out_dir=args.out)
    print(format_report(report))

    # one forward pass over the test masks, then all thresholds from it
    probs, gts = [], []
    for record in manifest.subset("test"):
        if record.mask_path is None:
            continue
        tile, mask = manifest.load_pair(record)
        prob, _, _ = predict(model, tile, recipe_name=args.recipe, tau=args.tau)
        probs.append(prob)
        gts.append(mask)
    print("tau,f1,miou")
    for tau, f1, miou in threshold_sweep(probs, gts, SWEEP_TAUS):
        print(f"{tau},{f1 * 100:.2f},{miou * 100:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
