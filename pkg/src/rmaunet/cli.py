"""Command-line entry point: import, synth, bands, train, eval, predict,
sweep-threshold.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Metrics are printed multiplied by 100. RMAUNET_DATA_DIR provides the default
--data location when the flag is omitted.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import bands as bands_mod
from .core_types import Tile
from .errors import DataError, RuntimeFailure
from .evaluation import SWEEP_TAUS, threshold_sweep
from .importers import IMPORTERS
from .model import ensemble_masks, load_checkpoint
from .tile_io import (
    Manifest,
    generate_synthetic_dataset,
    load_manifest,
    load_tile,
    save_manifest,
    save_mask,
    save_tile,
)
from .trainer import TrainConfig, evaluate, format_report, load_train_config, predict, train
from .viz import render_overlay

ENV_DATA_DIR = "RMAUNET_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve_data(parser: _Parser, data) -> Path:
    if data is None:
        data = os.environ.get(ENV_DATA_DIR)
    if data is None:
        parser.error(f"--data not given and {ENV_DATA_DIR} is unset")
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        parser.error(f"manifest not found: {path}")
    return path


def _claim_out(parser: _Parser, out, force: bool) -> Path:
    path = Path(out)
    if path.exists() and not force:
        parser.error(f"output path {path} exists; pass --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_metrics(prefix: str, values: dict) -> None:
    for key, value in values.items():
        print(f"{prefix}.{key}={100 * value:.2f}")


def _eval_config(args, model) -> TrainConfig:
    return TrainConfig(
        mode=model.cfg.mode,
        recipe=args.recipe,
        tau=args.tau,
        model=model.cfg,
    )


def _gather_probs(model, manifest: Manifest, records, recipe_name: str):
    """Per-record ensembled probability maps plus ground-truth masks."""
    import torch

    probs, gts = [], []
    model.eval()
    for record in records:
        tile, mask = manifest.load_pair(record)
        recipe = bands_mod.make_recipe(recipe_name, tile.band_names)
        tile = bands_mod.expand_bands(tile, recipe)
        x = torch.from_numpy(tile.data.transpose(2, 0, 1).copy()).unsqueeze(0)
        x = x.to(next(model.parameters()).dtype)
        with torch.no_grad():
            out = model(x)
        probs.append(ensemble_masks({r: m[0].numpy() for r, m in out["masks"].items()}))
        gts.append(mask.values if mask is not None else None)
    return probs, gts


def _cmd_import(parser, args) -> int:
    out = _claim_out(parser, args.out, args.force)
    manifest = IMPORTERS[args.dataset](args.src, out, seed=args.seed)
    print(f"imported {len(manifest)} records -> {out / 'manifest.csv'}")
    return 0


def _cmd_synth(parser, args) -> int:
    out = _claim_out(parser, args.out, args.force)
    manifest = generate_synthetic_dataset(
        n=args.n,
        channels=args.channels,
        seed=args.seed,
        out_dir=out,
        size=args.size,
        margin=args.margin,
    )
    positives = sum(1 for r in manifest.records if r.image_label == "landslide")
    print(
        f"wrote {len(manifest)} tiles ({positives} landslide) -> {out / 'manifest.csv'}"
    )
    return 0


def _cmd_bands(parser, args) -> int:
    src = Path(args.in_dir)
    manifest = load_manifest(src / "manifest.csv")
    out = _claim_out(parser, args.out, args.force)
    for record in manifest.records:
        tile, mask = manifest.load_pair(record)
        recipe = bands_mod.make_recipe(args.recipe, tile.band_names)
        save_tile(bands_mod.expand_bands(tile, recipe), out / record.tile_path)
        if mask is not None:
            save_mask(mask, out / record.mask_path)
    save_manifest(Manifest(manifest.records, manifest.source_name, out),
                  out / "manifest.csv")
    print(f"expanded {len(manifest)} tiles with recipe {args.recipe} -> {out}")
    return 0


def _cmd_train(parser, args) -> int:
    data = _resolve_data(parser, args.data)
    cfg = load_train_config(args.config)
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(
            cfg,
            seed=args.seed,
            aug=dataclasses.replace(cfg.aug, rng_seed=args.seed),
        )
    if args.select_on_test:
        import dataclasses

        cfg = dataclasses.replace(cfg, select_on_test=True)
    out = _claim_out(parser, args.out, args.force)
    manifest = load_manifest(data)
    _, report = train(manifest, cfg, out_dir=out)
    print(format_report(report), end="")
    return 0


def _cmd_eval(parser, args) -> int:
    data = _resolve_data(parser, args.data)
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(data)
    cfg = _eval_config(args, model)
    result = evaluate(model, manifest, cfg, split=args.split)
    if result["segmentation"] is not None:
        _print_metrics("segmentation", result["segmentation"])
    if model.cfg.mode in ("detection", "both"):
        _print_metrics("detection", result["detection"])
    if args.out is not None:
        out = _claim_out(parser, args.out, args.force)
        lines = ["task,metric,value"]
        if result["segmentation"] is not None:
            for k, v in result["segmentation"].items():
                lines.append(f"segmentation,{k},{100 * v:.4f}")
        for k, v in result["detection"].items():
            lines.append(f"detection,{k},{100 * v:.4f}")
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
        for record in manifest.subset(args.split):
            tile, mask = manifest.load_pair(record)
            _, pred, _ = predict(model, tile, args.recipe, args.tau)
            name = Path(record.tile_path).stem
            render_overlay(tile, pred, mask).save(out / f"overlay_{name}.png")
        print(f"wrote metrics and overlays -> {out}")
    return 0


def _cmd_predict(parser, args) -> int:
    model = load_checkpoint(args.checkpoint)
    tile = load_tile(args.tile)
    out = _claim_out(parser, args.out, args.force)
    prob, pred, detect_prob = predict(model, tile, args.recipe, args.tau)
    save_tile(
        Tile(id="prob", data=prob.values[:, :, None], band_names=("B1",)),
        out / "prob.rst",
    )
    save_mask(pred, out / "mask.rst")
    render_overlay(tile, pred, None).save(out / "overlay.png")
    print(f"detect_prob={detect_prob:.4f}")
    print(f"wrote prob.rst, mask.rst, overlay.png -> {out}")
    return 0


def _cmd_sweep(parser, args) -> int:
    data = _resolve_data(parser, args.data)
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(data)
    records = [r for r in manifest.subset(args.split) if r.mask_path is not None]
    if not records:
        parser.error(f"no mask-bearing records in split {args.split!r}")
    taus = [float(t) for t in args.taus.split(",")]
    probs, gts = _gather_probs(model, manifest, records, args.recipe)
    rows = threshold_sweep(probs, gts, taus)
    print("tau,f1,miou")
    for tau, f1, miou in rows:
        print(f"{tau:.2f},{100 * f1:.2f},{100 * miou:.2f}")
    if args.out is not None:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write("tau,f1,miou\n")
            for tau, f1, miou in rows:
                fh.write(f"{tau},{100 * f1:.4f},{100 * miou:.4f}\n")
        print(f"wrote {path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rmaunet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", help="normalize a public dataset")
    p.add_argument("--dataset", required=True, choices=sorted(IMPORTERS))
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_import)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--channels", type=int, default=14, choices=(3, 14))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--margin", type=float, default=0.35)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("bands", help="expand derived bands for a dataset")
    p.add_argument("--recipe", default="b15-23", choices=bands_mod.RECIPE_NAMES)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_bands)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--select-on-test", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--recipe", default="b15-23", choices=bands_mod.RECIPE_NAMES)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="run one tile through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--recipe", default="b15-23", choices=bands_mod.RECIPE_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("sweep-threshold", help="threshold sweep over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--taus", default=",".join(str(t) for t in SWEEP_TAUS))
    p.add_argument("--recipe", default="b15-23", choices=bands_mod.RECIPE_NAMES)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(parser, args)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
