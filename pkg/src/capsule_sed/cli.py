"""``capsule-sed`` command-line tool.

Exit codes: 0 success, 2 usage error, 3 missing file, 4 malformed manifest or
label file, 5 configuration schema violation, 6 training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, RunConfig, load_config
from .ctsr import CTSRError
from .datagen import generate_corpus
from .pipeline import (ManifestError, check_model_fits, evaluate_files, extract_corpus, load_dataset,
                       predict_split, read_manifest, reference_files, write_predictions)
from .training import TrainingError, train

EXIT_MISSING_FILE = 3
EXIT_MALFORMED_MANIFEST = 4
EXIT_CONFIG = 5
EXIT_TRAINING = 6


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON run configuration; flags given here override it")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="base configuration the JSON file is applied to (default: desk)")
    parser.add_argument("--seed", type=int, help="random seed for data generation and training")
    parser.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsule-sed", description="Capsule-network sound event detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic weakly-labeled corpus")
    _common(p)
    p.add_argument("--n-classes", type=int, help="number of event classes")

    p = sub.add_parser("extract-features", help="WAV corpus -> standardized CTSR features + manifest")
    _common(p)
    p.add_argument("--corpus", type=Path, help="corpus directory or corpus.json (default: paths.corpus)")
    p.add_argument("--standardizer", type=Path, help="reuse the standardizer stored in this directory")

    p = sub.add_parser("train", help="train on the manifest's train split, checkpointing every epoch")
    _common(p)
    p.add_argument("--features", type=Path, help="feature directory or manifest.json (default: paths.features)")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--batch-size", type=int, help="mini-batch size")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")

    p = sub.add_parser("predict", help="top-k checkpoint ensemble -> tags.csv + events.tsv")
    _common(p)
    p.add_argument("--features", type=Path, help="feature directory or manifest.json (default: paths.features)")
    p.add_argument("--run", type=Path, help="training run directory (default: paths.run)")
    p.add_argument("--split", default="test", help="manifest split to predict (default: test)")
    p.add_argument("--top-k", type=int, help="number of checkpoints to average")

    p = sub.add_parser("evaluate", help="score predictions against references, writing metrics.json")
    _common(p)
    p.add_argument("--predictions", type=Path, help="directory holding tags.csv and events.tsv")
    p.add_argument("--features", type=Path, help="manifest supplying reference labels and durations")
    p.add_argument("--split", default="test", help="manifest split to score (default: test)")
    p.add_argument("--reference-tags", type=Path, help="reference weak-label CSV (instead of the manifest)")
    p.add_argument("--reference-events", type=Path, help="reference event TSV (instead of the manifest)")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config, args.preset) if args.config else PRESETS[args.preset]()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _replace(obj, **changes):
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _synth(args, config: RunConfig) -> int:
    spec = config.synth
    if args.n_classes is not None:
        spec = _replace(spec, n_classes=args.n_classes)
    path = generate_corpus(args.out or config.paths.corpus, spec)
    print(path)
    return 0


def _extract(args, config: RunConfig) -> int:
    path = extract_corpus(args.corpus or config.paths.corpus, args.out or config.paths.features, config.features,
                          args.standardizer)
    print(path)
    return 0


def _train(args, config: RunConfig) -> int:
    overrides = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size)) if v is not None}
    train_config = _replace(config.train, **overrides)
    manifest = read_manifest(args.features or config.paths.features)
    train_set, val_set = load_dataset(manifest, "train"), load_dataset(manifest, "validation")
    check_model_fits(config.model, train_set)
    check_model_fits(config.model, val_set)
    out = Path(args.out or config.paths.run)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dataclasses.replace(config, train=train_config).to_json())
    records = train(config.model, train_config, train_set, val_set, out, args.resume)
    print(out / "train_log.jsonl" if records else out)
    return 0


def _predict(args, config: RunConfig) -> int:
    manifest = read_manifest(args.features or config.paths.features)
    data = load_dataset(manifest, args.split)
    top_k = args.top_k or config.train.top_k
    tags, events = predict_split(args.run or config.paths.run, config.model, data, config.postprocess, top_k)
    for path in write_predictions(args.out or config.paths.predictions, tags, events):
        print(path)
    return 0


def _evaluate(args, config: RunConfig) -> int:
    pred_dir = Path(args.predictions or config.paths.predictions)
    out = Path(args.out or pred_dir)
    if args.reference_tags:
        ref_tags, ref_events, durations = args.reference_tags, args.reference_events, None
        classes = None
    else:
        manifest = read_manifest(args.features or config.paths.features)
        ref_tags, ref_events, durations = reference_files(manifest, args.split, out)
        classes = manifest["classes"]
    pred_events = pred_dir / "events.tsv"
    report = evaluate_files(pred_dir / "tags.csv", ref_tags, pred_events if ref_events else None, ref_events,
                            durations, classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return 0


COMMANDS = {"synth-data": _synth, "extract-features": _extract, "train": _train, "predict": _predict,
            "evaluate": _evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ManifestError, CTSRError) as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED_MANIFEST
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
