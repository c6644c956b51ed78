"""Micro-averaged tagging scores and segment-based detection scores."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .postprocess import Event


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


@dataclass
class TaggingReport:
    precision: float
    recall: float
    f_score: float
    tp: int
    fp: int
    fn: int


@dataclass
class SegmentReport:
    precision: float
    recall: float
    f_score: float
    error_rate: float
    tp: int
    fp: int
    fn: int
    substitutions: int
    deletions: int
    insertions: int
    n_reference: int
    n_segments: int
    resolution: float = 1.0


@dataclass
class MetricsReport:
    tagging: TaggingReport
    sed: SegmentReport | None = None

    def to_json(self) -> str:
        """Deterministic serialization: sorted keys, floats rounded to 10 decimals."""
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, float):
                return round(obj, 10)
            return obj
        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True) + "\n"


def tagging_metrics(predicted: Mapping[str, Iterable], reference: Mapping[str, Iterable]) -> TaggingReport:
    """Micro precision/recall/F with TP/FP/FN pooled over every clip and class.

    Clips are the union of both mappings; a missing clip counts as an empty set.
    """
    tp = fp = fn = 0
    for clip in set(predicted) | set(reference):
        pred = set(predicted.get(clip, ()))
        ref = set(reference.get(clip, ()))
        tp += len(pred & ref)
        fp += len(pred - ref)
        fn += len(ref - pred)
    return TaggingReport(*_prf(tp, fp, fn), tp, fp, fn)


def segment_activity(events: Sequence[Event], classes: Sequence[str], duration: float,
                     resolution: float = 1.0) -> np.ndarray:
    """(segments, classes) boolean roll; a segment is active if an event overlaps it at all."""
    n_segments = max(1, math.ceil(duration / resolution - 1e-9))
    index = {c: i for i, c in enumerate(classes)}
    roll = np.zeros((n_segments, len(classes)), dtype=bool)
    for ev in events:
        if ev.label not in index:
            raise KeyError(f"unknown class label {ev.label!r}")
        first = max(0, math.floor(ev.onset / resolution))
        last = min(n_segments - 1, math.ceil(ev.offset / resolution) - 1)
        if last >= first:
            roll[first:last + 1, index[ev.label]] = True
    return roll


def segment_metrics(predicted: Mapping[str, Sequence[Event]], reference: Mapping[str, Sequence[Event]],
                    durations: Mapping[str, float], classes: Sequence[str] | None = None,
                    resolution: float = 1.0) -> SegmentReport:
    """Segment-based F-score and error rate over fixed-length segments of every clip.

    Per segment: S = min(FN, FP), D = max(0, FN - FP), I = max(0, FP - FN);
    ER = (S + D + I) / N summed over segments, N counting active reference pairs.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if classes is None:
        labels = {ev.label for evs in list(predicted.values()) + list(reference.values()) for ev in evs}
        classes = sorted(labels)
    totals = dict(tp=0, fp=0, fn=0, s=0, d=0, i=0, n=0, segments=0)
    for clip, duration in durations.items():
        if duration < 0:
            raise ValueError(f"negative duration for clip {clip}")
        ref = segment_activity(reference.get(clip, ()), classes, duration, resolution)
        est = segment_activity(predicted.get(clip, ()), classes, duration, resolution)
        tp = (ref & est).sum(axis=1)
        fp = (est & ~ref).sum(axis=1)
        fn = (ref & ~est).sum(axis=1)
        totals["tp"] += int(tp.sum())
        totals["fp"] += int(fp.sum())
        totals["fn"] += int(fn.sum())
        totals["s"] += int(np.minimum(fn, fp).sum())
        totals["d"] += int(np.maximum(0, fn - fp).sum())
        totals["i"] += int(np.maximum(0, fp - fn).sum())
        totals["n"] += int(ref.sum())
        totals["segments"] += len(ref)
    p, r, f = _prf(totals["tp"], totals["fp"], totals["fn"])
    errors = totals["s"] + totals["d"] + totals["i"]
    er = errors / totals["n"] if totals["n"] else float(errors > 0)
    return SegmentReport(p, r, f, er, totals["tp"], totals["fp"], totals["fn"], totals["s"], totals["d"],
                         totals["i"], totals["n"], totals["segments"], resolution)
