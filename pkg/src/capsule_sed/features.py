"""Log-mel feature extraction, fixed-length padding and standardization."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample_poly

from . import ctsr


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 64.0
    frame_overlap_ms: float = 20.0
    hop_length: int | None = 666  # samples; None derives it from frame length minus overlap
    mel_bins: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    target_frames: int = 240
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.frame_length_ms <= self.frame_overlap_ms:
            raise ValueError("frame length must exceed frame overlap")
        if self.mel_bins < 1 or self.target_frames < 1:
            raise ValueError("mel_bins and target_frames must be positive")
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax above Nyquist")

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate / 1000))

    @property
    def hop(self) -> int:
        if self.hop_length is not None:
            return self.hop_length
        return self.frame_length - int(round(self.frame_overlap_ms * self.sample_rate / 1000))


def desk_feature_config() -> FeatureConfig:
    """60 frames per 10-second clip (hop of 2666 samples), otherwise unchanged."""
    return FeatureConfig(hop_length=2666, target_frames=60)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    clip_id: str
    standardized: bool = False


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM WAV as float64 in [-1, 1); multichannel audio is averaged to mono."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate, channels = w.getframerate(), w.getnchannels()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return pcm.reshape(-1, channels).mean(axis=1), rate


def write_wav(path, signal: np.ndarray, rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(signal) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def resample(signal: np.ndarray, src_rate: int, dst_rate: int = 16000) -> np.ndarray:
    """Polyphase band-limited resampling; output has round(n * dst/src) samples."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise ValueError("cannot resample an empty signal")
    if src_rate == dst_rate:
        return signal.copy()
    g = gcd(int(src_rate), int(dst_rate))
    out = resample_poly(signal, dst_rate // g, src_rate // g)
    n = int(round(len(signal) * dst_rate / src_rate))
    if len(out) < n:
        out = np.pad(out, (0, n - len(out)))
    return out[:n]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(config: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (mel_bins, frame_length // 2 + 1), peak weight 1."""
    n_fft = config.frame_length
    freqs = np.fft.rfftfreq(n_fft, 1.0 / config.sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def logmel(signal: np.ndarray, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Hann-windowed magnitude STFT -> mel filterbank -> log(x + floor).

    Frames start at k*hop for k < floor(n / hop); the tail is zero-padded so the
    last frame is complete. Returns (frames, mel_bins) float32.
    """
    signal = np.asarray(signal, dtype=np.float64)
    n, frame, hop = len(signal), config.frame_length, config.hop
    if n < frame:
        raise ValueError(f"signal of {n} samples is shorter than one frame ({frame})")
    n_frames = n // hop
    needed = (n_frames - 1) * hop + frame
    if needed > n:
        signal = np.pad(signal, (0, needed - n))
    frames = sliding_window_view(signal, frame)[::hop][:n_frames]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame) / frame)
    magnitude = np.abs(np.fft.rfft(frames * window, axis=1))
    mel = magnitude @ mel_filterbank(config).T
    return np.log(mel + config.log_floor).astype(np.float32)


def pad_or_crop(features: np.ndarray, target_frames: int = 240, pad_value: float | None = None,
                log_floor: float = 1e-10) -> np.ndarray:
    """Crop the tail or append frames so there are exactly ``target_frames``.

    Appended frames default to the silence value log(log_floor).
    """
    features = np.asarray(features)
    if len(features) >= target_frames:
        return features[:target_frames].copy()
    fill = np.log(log_floor) if pad_value is None else pad_value
    pad = np.full((target_frames - len(features),) + features.shape[1:], fill, dtype=features.dtype)
    return np.concatenate([features, pad])


def extract_file(path, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """WAV file -> padded (target_frames, mel_bins) log-mel matrix, not yet standardized."""
    signal, rate = read_wav(path)
    signal = resample(signal, rate, config.sample_rate)
    return pad_or_crop(logmel(signal, config), config.target_frames, log_floor=config.log_floor)


@dataclass
class Standardizer:
    mean: np.ndarray
    var: np.ndarray
    min_std: float = 1e-6

    @classmethod
    def fit(cls, features) -> "Standardizer":
        """Per-bin statistics over every frame of every training clip."""
        stacked = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, np.shape(f)[-1]) for f in features])
        # rounded to float32 so a saved and reloaded standardizer is bit-identical
        as_stored = lambda a: a.astype(np.float32).astype(np.float64)
        return cls(as_stored(stacked.mean(axis=0)), as_stored(stacked.var(axis=0)))

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), self.min_std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return ((np.asarray(features, dtype=np.float64) - self.mean) / self.std).astype(np.float32)

    def invert(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.std + self.mean

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ctsr.save(directory / "standardizer_mean.ctsr", self.mean)
        ctsr.save(directory / "standardizer_var.ctsr", self.var)
        meta = {"mean": "standardizer_mean.ctsr", "var": "standardizer_var.ctsr", "min_std": self.min_std,
                "bins": int(len(self.mean))}
        (directory / "standardizer.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Standardizer":
        directory = Path(directory)
        meta = json.loads((directory / "standardizer.json").read_text())
        mean = ctsr.load(directory / meta["mean"]).astype(np.float64)
        var = ctsr.load(directory / meta["var"]).astype(np.float64)
        return cls(mean, var, meta["min_std"])
