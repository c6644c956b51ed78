"""File-level steps behind the command-line tool.

Feature manifest layout (``manifest.json`` in the feature directory)::

    {"classes": [...], "features": {FeatureConfig}, "standardizer": "standardizer.json",
     "splits": {split: {"clips": {clip_id: {"file", "duration", "labels"}},
                        "strong": path or null}}}

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ctsr
from .features import FeatureConfig, Standardizer, extract_file
from .metrics import MetricsReport, segment_metrics, tagging_metrics
from .model import ModelConfig
from .postprocess import (PostprocessConfig, detect, read_event_list, read_weak_labels, write_event_list,
                          write_weak_labels)
from .training import Dataset, ensemble_predict, select_checkpoints

MANIFEST = "manifest.json"


class ManifestError(ValueError):
    """A manifest or label file exists but does not have the expected structure."""


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: top level must be an object")
    return data


def _require(data: dict, keys, where) -> None:
    missing = [k for k in keys if k not in data]
    if missing:
        raise ManifestError(f"{where}: missing keys {missing}")


def read_corpus(path) -> dict:
    """Load and check a ``corpus.json`` written by the data generator."""
    data = _read_json(path)
    _require(data, ("classes", "splits"), path)
    for split, info in data["splits"].items():
        _require(info, ("audio_dir", "weak", "durations"), f"{path}: split {split}")
    return data


def extract_corpus(corpus_path, out_dir, config: FeatureConfig = FeatureConfig(), standardizer_dir=None) -> Path:
    """Extract, standardize and store features for every split of a corpus.

    The standardizer is fit on the ``train`` split unless ``standardizer_dir``
    names an existing one. Returns the path of the written manifest.
    """
    corpus_path = Path(corpus_path)
    if corpus_path.is_dir():
        corpus_path = corpus_path / "corpus.json"
    corpus = read_corpus(corpus_path)
    root = corpus_path.parent
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    raw: dict[str, dict[str, np.ndarray]] = {}
    for split, info in corpus["splits"].items():
        raw[split] = {}
        for clip_id in sorted(info["durations"]):
            wav = root / info["audio_dir"] / f"{clip_id}.wav"
            if not wav.is_file():
                raise FileNotFoundError(f"{wav} listed in {corpus_path} does not exist")
            raw[split][clip_id] = extract_file(wav, config)

    if standardizer_dir is not None:
        standardizer = Standardizer.load(standardizer_dir)
    elif "train" in raw:
        standardizer = Standardizer.fit(list(raw["train"].values()))
    else:
        raise ManifestError(f"{corpus_path}: no train split to fit the standardizer on")
    standardizer.save(out)

    manifest = {"classes": corpus["classes"], "features": asdict(config), "standardizer": "standardizer.json",
                "splits": {}}
    for split, clips in raw.items():
        info = corpus["splits"][split]
        labels = read_weak_labels(root / info["weak"])
        (out / split).mkdir(exist_ok=True)
        entries = {}
        for clip_id, values in clips.items():
            rel = f"{split}/{clip_id}.ctsr"
            ctsr.save(out / rel, standardizer.apply(values))
            entries[clip_id] = {"file": rel, "duration": float(info["durations"][clip_id]),
                                "labels": sorted(labels.get(clip_id, ()))}
        strong = info.get("strong")
        manifest["splits"][split] = {"clips": entries,
                                     "strong": str((root / strong).resolve()) if strong else None}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    data = _read_json(path)
    _require(data, ("classes", "splits"), path)
    for split, info in data["splits"].items():
        _require(info, ("clips",), f"{path}: split {split}")
        for clip_id, entry in info["clips"].items():
            _require(entry, ("file", "duration", "labels"), f"{path}: clip {clip_id}")
    data["_root"] = str(path.parent)
    return data


def load_dataset(manifest: dict, split: str) -> Dataset:
    if split not in manifest["splits"]:
        raise ManifestError(f"manifest has no split {split!r}")
    classes = list(manifest["classes"])
    index = {c: i for i, c in enumerate(classes)}
    clips = manifest["splits"][split]["clips"]
    ids = sorted(clips)
    features, targets = [], np.zeros((len(ids), len(classes)), dtype=np.float32)
    for n, clip_id in enumerate(ids):
        path = Path(manifest["_root"]) / clips[clip_id]["file"]
        if not path.is_file():
            raise FileNotFoundError(f"{path} listed in the manifest does not exist")
        features.append(ctsr.load(path))
        for label in clips[clip_id]["labels"]:
            if label not in index:
                raise ManifestError(f"clip {clip_id}: label {label!r} is not a manifest class")
            targets[n, index[label]] = 1.0
    shapes = {f.shape for f in features}
    if len(shapes) > 1:
        raise ManifestError(f"split {split!r} mixes feature shapes {sorted(shapes)}")
    stacked = np.stack(features) if features else np.zeros((0, 0, 0), np.float32)
    return Dataset(ids, stacked, targets, classes)


def check_model_fits(model_config: ModelConfig, data: Dataset) -> None:
    if data.targets.shape[1] != model_config.n_classes:
        raise ManifestError(f"manifest has {data.targets.shape[1]} classes, model expects {model_config.n_classes}")
    if len(data) and data.features.shape[1:] != (model_config.input_frames, model_config.mel_bins):
        raise ManifestError(f"features are {data.features.shape[1:]}, model expects "
                            f"{(model_config.input_frames, model_config.mel_bins)}")


def predict_split(run_dir, model_config: ModelConfig, data: Dataset, post: PostprocessConfig,
                  top_k: int = 5) -> tuple[dict[str, set[str]], dict[str, list]]:
    """Tags and events per clip from the top-k checkpoint ensemble."""
    check_model_fits(model_config, data)
    pred = ensemble_predict(select_checkpoints(run_dir, top_k), model_config, data.features)
    tags, events = {}, {}
    for n, clip_id in enumerate(data.clip_ids):
        idx, evs = detect(pred.y[n], pred.o[n], post, data.classes)
        tags[clip_id] = {data.classes[k] for k in idx}
        events[clip_id] = evs
    return tags, events


def write_predictions(out_dir, tags, events) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_weak_labels(out / "tags.csv", tags)
    write_event_list(out / "events.tsv", events)
    return out / "tags.csv", out / "events.tsv"


def _read_labels(path, reader):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path} does not exist")
    try:
        return reader(path)
    except ValueError as exc:
        raise ManifestError(str(exc)) from exc


def evaluate_files(pred_tags, ref_tags, pred_events=None, ref_events=None, durations=None,
                   classes=None) -> MetricsReport:
    """Metrics from prediction/reference files.

    Segment scores need both event files; clip durations default to 10 s for
    every clip named in the reference tags.
    """
    predicted = _read_labels(pred_tags, read_weak_labels)
    reference = _read_labels(ref_tags, read_weak_labels)
    report = MetricsReport(tagging_metrics(predicted, reference))
    if pred_events is not None and ref_events is not None:
        est = _read_labels(pred_events, read_event_list)
        ref = _read_labels(ref_events, read_event_list)
        if durations is None:
            durations = {clip: 10.0 for clip in reference}
        if classes is None:
            classes = sorted({lab for labs in list(reference.values()) + list(predicted.values()) for lab in labs}
                             | {e.label for evs in list(est.values()) + list(ref.values()) for e in evs})
        report.sed = segment_metrics(est, ref, durations, classes)
    return report


def reference_files(manifest: dict, split: str, out_dir) -> tuple[Path, Path | None, dict[str, float]]:
    """Write the split's reference tags (from the manifest) and return them with the strong file and durations."""
    if split not in manifest["splits"]:
        raise ManifestError(f"manifest has no split {split!r}")
    info = manifest["splits"][split]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tags = {clip: set(entry["labels"]) for clip, entry in info["clips"].items()}
    write_weak_labels(out / f"{split}_reference_tags.csv", tags)
    strong = Path(info["strong"]) if info.get("strong") else None
    durations = {clip: float(entry["duration"]) for clip, entry in info["clips"].items()}
    return out / f"{split}_reference_tags.csv", strong, durations
