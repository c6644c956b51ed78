"""Synthetic weakly-labeled sound event corpus.

Each class has a fixed spectral signature (steady tone, band-limited noise
burst or upward chirp around a class frequency). Clips hold 1-3 events over
low-level white noise. Training uses only the clip-level label sets; the
strong onset/offset annotations are written for scoring.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .features import FeatureConfig, hz_to_mel, mel_band_centers, write_wav
from .postprocess import Event, write_event_list, write_weak_labels

EVENT_TYPES = ("tone", "noise", "chirp")
CLASS_FREQUENCIES = (1000.0, 3000.0, 450.0, 5500.0, 1800.0, 700.0, 4200.0, 2400.0)
SPLIT_ORDER = ("train", "validation", "test")


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 3
    clips: dict = field(default_factory=lambda: {"train": 200, "validation": 50, "test": 50})
    clip_duration: float = 10.0
    sample_rate: int = 16000
    events_per_clip: tuple[int, int] = (1, 3)
    event_duration: tuple[float, float] = (1.0, 4.0)
    snr_db: tuple[float, float] = (6.0, 18.0)
    background_rms: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(CLASS_FREQUENCIES):
            raise ValueError(f"n_classes must be in 1..{len(CLASS_FREQUENCIES)}")
        if self.events_per_clip[0] < 1 or self.events_per_clip[0] > self.events_per_clip[1]:
            raise ValueError("events_per_clip must satisfy 1 <= min <= max")
        if self.event_duration[1] > self.clip_duration:
            raise ValueError("events cannot outlast the clip")
        bands = sorted(nearest_mel_band(f) for f in CLASS_FREQUENCIES[:self.n_classes])
        if any(b - a < 2 for a, b in zip(bands, bands[1:])):
            raise ValueError("class frequencies must be at least 2 mel bands apart")

    @property
    def classes(self) -> list[str]:
        return [class_name(k) for k in range(self.n_classes)]


def nearest_mel_band(freq: float, config: FeatureConfig = FeatureConfig()) -> int:
    return int(np.argmin(np.abs(hz_to_mel(mel_band_centers(config)) - hz_to_mel(freq))))


def class_name(k: int) -> str:
    return f"{EVENT_TYPES[k % 3]}{int(CLASS_FREQUENCIES[k])}"


def _ramp(n: int, rate: int) -> np.ndarray:
    r = min(int(0.02 * rate), n // 2)
    env = np.ones(n)
    if r > 0:
        env[:r] = np.linspace(0, 1, r)
        env[n - r:] = np.linspace(1, 0, r)
    return env


def event_signal(k: int, n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS waveform of class ``k`` lasting ``n`` samples."""
    f = CLASS_FREQUENCIES[k]
    t = np.arange(n) / rate
    kind = EVENT_TYPES[k % 3]
    if kind == "tone":
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif kind == "noise":
        sos = butter(4, [0.85 * f, 1.15 * f], btype="bandpass", fs=rate, output="sos")
        x = sosfilt(sos, rng.standard_normal(n + 1024))[1024:]
    else:
        f0, f1 = 0.8 * f, 1.25 * f
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / (n / rate) * t ** 2))
    x = x * _ramp(n, rate)
    return x / np.sqrt(np.mean(x ** 2))


def synth_clip(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[Event]]:
    rate = spec.sample_rate
    n = int(round(spec.clip_duration * rate))
    audio = rng.standard_normal(n) * spec.background_rms
    events = []
    for _ in range(int(rng.integers(spec.events_per_clip[0], spec.events_per_clip[1] + 1))):
        k = int(rng.integers(spec.n_classes))
        dur = rng.uniform(*spec.event_duration)
        onset = rng.uniform(0, spec.clip_duration - dur)
        start = int(round(onset * rate))
        length = min(int(round(dur * rate)), n - start)
        gain = spec.background_rms * 10 ** (rng.uniform(*spec.snr_db) / 20)
        audio[start:start + length] += gain * event_signal(k, length, rate, rng)
        events.append(Event(class_name(k), start / rate, (start + length) / rate))
    peak = np.abs(audio).max()
    if peak > 0.99:
        audio *= 0.99 / peak
    return audio, sorted(events, key=lambda e: (e.onset, e.offset, e.label))


def generate_corpus(out_dir, spec: SynthSpec = SynthSpec()) -> Path:
    """Write WAVs, weak-label CSVs, strong-annotation TSVs and ``corpus.json``; returns its path."""
    out = Path(out_dir)
    meta = {"classes": spec.classes, "sample_rate": spec.sample_rate, "spec": asdict(spec), "splits": {}}
    for split_idx, split in enumerate(s for s in SPLIT_ORDER if s in spec.clips):
        audio_dir = out / "audio" / split
        audio_dir.mkdir(parents=True, exist_ok=True)
        weak, strong, clips = {}, {}, {}
        for i in range(spec.clips[split]):
            clip_id = f"{split}_{i:04d}"
            rng = np.random.default_rng([spec.seed, split_idx, i])
            audio, events = synth_clip(spec, rng)
            write_wav(audio_dir / f"{clip_id}.wav", audio, spec.sample_rate)
            weak[clip_id] = {e.label for e in events}
            strong[clip_id] = events
            clips[clip_id] = spec.clip_duration
        write_weak_labels(out / f"{split}_weak.csv", weak)
        write_event_list(out / f"{split}_strong.tsv", strong)
        meta["splits"][split] = {"audio_dir": f"audio/{split}", "weak": f"{split}_weak.csv",
                                 "strong": f"{split}_strong.tsv", "durations": clips}
    path = out / "corpus.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path
