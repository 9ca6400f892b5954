"""Command-line entry point: ``landcover-cgan <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__

log = logging.getLogger("landcover_cgan")

RUN_ROOT_ENV = "LANDCOVER_CGAN_RUNS"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _config_section(path: str | None, section: str) -> dict:
    """Read ``section`` from a YAML config; train also accepts top-level keys."""
    if not path:
        return {}
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if section in doc and isinstance(doc[section], dict):
        return dict(doc[section])
    if section == "train":
        return {k: v for k, v in doc.items() if not isinstance(v, dict)}
    return {}


def _write_resolved(run_dir: Path, command: str, resolved: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, **resolved}
    (run_dir / "resolved_config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))


def cmd_synth(args) -> int:
    from .synth import SynthParams, synth_corpus, synth_scenes
    from .taxonomy import load_taxonomy

    out = Path(args.out or args.run_dir or _run_root() / f"synth-{args.seed}")
    split_counts = None
    if args.splits:
        tr, va, te = (int(v) for v in args.splits.split(","))
        split_counts = {"train": tr, "validation": va, "test": te}
    if args.raw:
        manifest = synth_scenes(args.seed, args.n, load_taxonomy(args.taxonomy), out,
                                scene_tiles=args.scene_tiles, label_factor=args.label_factor,
                                split_counts=split_counts)
        log.info("wrote %d raw scenes to %s", len(manifest), out / "scenes.jsonl")
    else:
        _, manifest = synth_corpus(args.seed, args.n, SynthParams(n_seeds=args.cells),
                                   split_counts=split_counts, out_dir=out)
        log.info("wrote %d tiles to %s", len(manifest), out / "manifest.jsonl")
    _write_resolved(out, "synth", {"seed": args.seed, "n": args.n, "raw": args.raw, "splits": split_counts,
                                   "cells": args.cells, "scene_tiles": args.scene_tiles,
                                   "label_factor": args.label_factor})
    return 0


def cmd_prepare(args) -> int:
    from .data import load_manifest, prepare_corpus
    from .taxonomy import load_taxonomy

    opts = _config_section(args.config, "prepare")
    stride = args.stride or opts.get("stride", 256)
    threshold = args.threshold if args.threshold is not None else opts.get("threshold", 0.0)
    out = Path(args.out or args.run_dir or _run_root() / "prepared")
    scenes = load_manifest(args.scenes)
    taxonomy = load_taxonomy(args.taxonomy)
    result = prepare_corpus(scenes, taxonomy, out, stride=stride, threshold=threshold)
    log.info("kept %d tiles, dropped %d; manifest at %s", result.kept, result.dropped, result.manifest_path)
    _write_resolved(out, "prepare", {"scenes": str(Path(args.scenes).resolve()),
                                     "taxonomy": args.taxonomy, "stride": stride, "threshold": threshold,
                                     "kept": result.kept, "dropped": result.dropped})
    return 0


def cmd_train(args) -> int:
    from .data import load_manifest
    from .engine import TrainConfig, audit_batches, fit

    doc = _config_section(args.config, "train")
    overrides = {"mode": args.mode, "seed": args.seed, "width_multiplier": args.width_mult,
                 "max_epochs": args.max_epochs, "batch_size": args.batch_size,
                 "early_stop_patience": args.patience, "precision": args.precision}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(doc)
    manifest = load_manifest(args.manifest)
    run_dir = Path(args.run_dir or _run_root() / f"{config.mode}-seed{config.seed}")
    _write_resolved(run_dir, "train", {"manifest": str(Path(args.manifest).resolve()),
                                       "resume": args.resume, "train": config.to_dict()})
    result = fit(config, manifest, run_dir, resume=args.resume)
    leaks = audit_batches(result.log_path, manifest)
    if leaks:
        log.error("test-region tiles found in training batches: %s", sorted(set(leaks)))
        return 1
    log.info("best checkpoint %s", result.best_checkpoint)
    return 0


def _check_leakage(ckpt: dict, manifest, split: str) -> None:
    from .errors import ManifestError

    trained_on = set((ckpt.get("meta") or {}).get("train_regions", ()))
    if split == "test":
        leaked = trained_on & manifest.regions("test")
        if leaked:
            raise ManifestError(f"test regions {sorted(leaked)} were used to train this checkpoint")


def cmd_eval(args) -> int:
    from .data import TileDataset, load_manifest
    from .engine import checkpoint_dtype, evaluate, load_generator
    from .metrics import format_table, report_emit

    manifest = load_manifest(args.manifest)
    records = manifest.split(args.split)
    if not records:
        raise ValueError(f"split {args.split!r} has no tiles")
    dataset = TileDataset(records)
    out = Path(args.out or args.run_dir or _run_root() / f"eval-{args.split}")
    reports = []
    for ckpt_path in args.checkpoint:
        gen, ckpt = load_generator(ckpt_path)
        _check_leakage(ckpt, manifest, args.split)
        tag = args.tags[len(reports)] if args.tags and len(args.tags) > len(reports) else ckpt["mode"]
        report = evaluate(gen, dataset, args.split, tag, dtype=checkpoint_dtype(ckpt))
        reports.append(report)
    out.mkdir(parents=True, exist_ok=True)
    for i, report in enumerate(reports):
        name = f"report_{args.split}_{report.model}" + (f"_{i}" if len(reports) > 1 else "")
        (out / f"{name}.json").write_text(report_emit(report))
    table = format_table(reports)
    (out / f"table_{args.split}.txt").write_text(table)
    print(table, end="")
    _write_resolved(out, "eval", {"checkpoints": [str(Path(c).resolve()) for c in args.checkpoint],
                                  "manifest": str(Path(args.manifest).resolve()), "split": args.split})
    return 0


def cmd_predict(args) -> int:
    from . import tilefile
    from .data import ManifestRecord, load_manifest, normalize_image
    from .engine import checkpoint_dtype, load_generator, predict
    from .metrics import composite, decode, render, save_png
    from .taxonomy import load_taxonomy

    colormap = load_taxonomy(args.taxonomy).colormap
    if args.composite and len(args.checkpoint) != 2:
        raise ValueError("--composite needs exactly two checkpoints")
    models = []
    for path in args.checkpoint:
        gen, ckpt = load_generator(path)
        models.append((gen, checkpoint_dtype(ckpt), ckpt["mode"]))

    if args.manifest:
        records = load_manifest(args.manifest).split(args.split)
        labelled = True
    else:
        records = [ManifestRecord(Path(p), Path(p), "", "test") for p in args.tiles]
        labelled = False
    if not records:
        raise ValueError("no tiles to predict")
    if args.composite and not labelled:
        raise ValueError("--composite needs --manifest so true labels are available")

    out = Path(args.out or args.run_dir or _run_root() / "predict")
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        image = tilefile.read(rec.image)
        x = normalize_image(image)[None]
        maps = []
        for i, (gen, dtype, mode) in enumerate(models):
            cmap = decode(predict(gen, x, dtype))[0]
            maps.append(cmap)
            sub = out / (f"{i}_{mode}" if len(models) > 1 else "")
            sub.mkdir(parents=True, exist_ok=True)
            tilefile.write(sub / f"{rec.name}.pred.lct", cmap)
            save_png(render(cmap, colormap), sub / f"{rec.name}.png")
        if args.composite:
            truth = tilefile.read(rec.label)
            save_png(composite(image, truth, maps, colormap), out / f"{rec.name}.sheet.png")
    log.info("wrote predictions for %d tiles to %s", len(records), out)
    _write_resolved(out, "predict", {"checkpoints": [str(Path(c).resolve()) for c in args.checkpoint],
                                     "manifest": args.manifest, "split": args.split,
                                     "tiles": args.tiles, "composite": args.composite})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int, default=None, help="run seed (all randomness derives from it)")
    common.add_argument("--run-dir", help=f"output directory (default under ${RUN_ROOT_ENV} or ./runs)")
    common.add_argument("--width-mult", default=None, help="hidden channel multiplier, e.g. 1 or 1/8")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="landcover-cgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n", type=_positive_int, required=True, help="number of tiles (or scenes with --raw)")
    p.add_argument("--out")
    p.add_argument("--splits", help="train,validation,test counts summing to --n")
    p.add_argument("--cells", type=_positive_int, default=6, help="Voronoi cells per tile")
    p.add_argument("--raw", action="store_true", help="emit source-legend scenes for `prepare`")
    p.add_argument("--scene-tiles", type=_positive_int, default=2)
    p.add_argument("--label-factor", type=_positive_int, default=1)
    p.add_argument("--taxonomy")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="remap, filter and tile raw scenes")
    p.add_argument("--scenes", required=True, help="scene manifest (JSON lines)")
    p.add_argument("--taxonomy", help="taxonomy YAML (default: bundled NLCD mapping)")
    p.add_argument("--out")
    p.add_argument("--stride", type=_positive_int)
    p.add_argument("--threshold", type=float, help="max dropped-class pixel fraction per tile")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a cgan or cnn model")
    p.add_argument("--mode", choices=("cgan", "cnn"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--patience", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-class F1 of one or more checkpoints")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--tags", nargs="+", help="row labels for the checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="write class maps and renders")
    p.add_argument("--checkpoint", nargs="+", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--tiles", nargs="+", help="image tile files")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--composite", action="store_true", help="RGB/NIR/truth/model A/model B sheets")
    p.add_argument("--taxonomy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
