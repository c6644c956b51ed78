"""Turning probability curves into tags and timed events, plus event/label file formats."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class PostprocessConfig:
    tag_threshold: float = 0.3
    frame_threshold: float = 0.6
    dilation_size: int = 10
    erosion_size: int = 5
    clip_duration: float = 10.0

    def __post_init__(self):
        if not (0 < self.tag_threshold < 1 and 0 < self.frame_threshold < 1):
            raise ValueError("thresholds must lie strictly between 0 and 1")
        if self.dilation_size < 0 or self.erosion_size < 0:
            raise ValueError("structuring element sizes must be non-negative")


class Event(NamedTuple):
    label: str
    onset: float
    offset: float


def tag_decision(y, threshold: float = 0.3) -> set[int]:
    """Indices of classes whose clip probability strictly exceeds ``threshold``."""
    return {int(i) for i in np.flatnonzero(np.asarray(y) > threshold)}


def _offsets(size: int) -> range:
    # centered flat element; for even sizes the extra cell sits on the negative side
    return range(-(size // 2), size - size // 2)


def binary_dilation(x: np.ndarray, size: int) -> np.ndarray:
    x = np.asarray(x, dtype=bool)
    if size <= 1:
        return x.copy()
    out = np.zeros_like(x)
    n = len(x)
    for d in _offsets(size):
        # out[t] |= x[t - d]
        if d >= 0:
            out[d:] |= x[:n - d]
        else:
            out[:n + d] |= x[-d:]
    return out


def binary_erosion(x: np.ndarray, size: int) -> np.ndarray:
    """Erosion with cells outside the sequence treated as 0."""
    x = np.asarray(x, dtype=bool)
    if size <= 1:
        return x.copy()
    out = np.ones_like(x)
    n = len(x)
    for d in _offsets(size):
        # out[t] &= x[t + d]
        shifted = np.zeros_like(x)
        if d >= 0:
            shifted[:n - d] = x[d:]
        else:
            shifted[-d:] = x[:n + d]
        out &= shifted
    return out


def closing(x: np.ndarray, dilation_size: int, erosion_size: int) -> np.ndarray:
    """Dilate then erode a 1-D binary sequence.

    The sequence is zero-padded by the dilation reach on both sides first, so
    dilation is not truncated at the clip edges; the result is cropped back.
    """
    x = np.asarray(x, dtype=bool)
    pad = max(dilation_size, erosion_size)
    padded = np.pad(x, pad)
    out = binary_erosion(binary_dilation(padded, dilation_size), erosion_size)
    return out[pad:pad + len(x)]


def active_runs(x: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as (start, end) with ``end`` inclusive."""
    x = np.asarray(x, dtype=np.int8)
    edges = np.diff(np.concatenate([[0], x, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def extract_events(o: np.ndarray, config: PostprocessConfig, tags: Iterable[int],
                   labels: Sequence[str] | None = None) -> list[Event]:
    """Events for each tagged class from its (T, L) capsule-length curve.

    The curve is binarized at ``frame_threshold`` (strict), closed, and every run
    of active slices becomes one event. Output is sorted by onset.
    """
    o = np.asarray(o)
    n_slices = o.shape[0]
    slice_duration = config.clip_duration / n_slices
    events = []
    for cls in sorted(tags):
        active = closing(o[:, cls] > config.frame_threshold, config.dilation_size, config.erosion_size)
        label = labels[cls] if labels is not None else str(cls)
        for start, end in active_runs(active):
            events.append(Event(label, start * slice_duration, min((end + 1) * slice_duration, config.clip_duration)))
    return sorted(events, key=lambda e: (e.onset, e.offset, e.label))


def detect(y: np.ndarray, o: np.ndarray, config: PostprocessConfig,
           labels: Sequence[str] | None = None) -> tuple[set[int], list[Event]]:
    tags = tag_decision(y, config.tag_threshold)
    return tags, extract_events(o, config, tags, labels)


# file formats

def write_event_list(path, events: dict[str, list[Event]]) -> None:
    """Tab-separated ``clip_id onset offset label`` lines, seconds with 6 decimals."""
    lines = []
    for clip_id in sorted(events):
        for ev in events[clip_id]:
            lines.append(f"{clip_id}\t{ev.onset:.6f}\t{ev.offset:.6f}\t{ev.label}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_event_list(path) -> dict[str, list[Event]]:
    out: dict[str, list[Event]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        clip_id, onset, offset, label = parts
        ev = Event(label, float(onset), float(offset))
        if not ev.onset < ev.offset:
            raise ValueError(f"{path}:{lineno}: onset must precede offset")
        out.setdefault(clip_id, []).append(ev)
    for evs in out.values():
        evs.sort(key=lambda e: (e.onset, e.offset, e.label))
    return out


def write_weak_labels(path, labels: dict[str, Iterable[str]]) -> None:
    """CSV rows ``clip_id,label1;label2;...`` (labels sorted)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for clip_id in sorted(labels):
            writer.writerow([clip_id, ";".join(sorted(labels[clip_id]))])


def read_weak_labels(path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected clip_id,labels")
            out[row[0]] = {lab for lab in row[1].split(";") if lab}
    return out
