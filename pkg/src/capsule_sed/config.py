"""One JSON document holding every configuration section, with strict loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datagen import SynthSpec
from .features import FeatureConfig, desk_feature_config
from .model import ModelConfig, desk_model_config
from .postprocess import PostprocessConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """The document does not match the configuration schema."""


@dataclass(frozen=True)
class Paths:
    corpus: str = "corpus"
    features: str = "features"
    run: str = "run"
    predictions: str = "predictions"


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    synth: SynthSpec = field(default_factory=SynthSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, synth=dataclasses.replace(self.synth, seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed))


def paper_config() -> RunConfig:
    return RunConfig()


def desk_config() -> RunConfig:
    """Small preset for CPU runs on the synthetic corpus.

    Ten epochs of 200 clips are far fewer updates than the full setup, so the
    batch is smaller and the learning rate higher. Detected curves already
    overrun the true events, so the closing uses equal dilation and erosion
    (gap filling without net extension).
    """
    return RunConfig(
        features=desk_feature_config(),
        model=desk_model_config(3),
        train=TrainConfig(learning_rate=0.003, batch_size=8, epochs=10),
        postprocess=PostprocessConfig(dilation_size=3, erosion_size=3),
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if value is None and "None" in str(fields[name].type):
            kwargs[name] = None
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool) != isinstance(value, bool) or (
                isinstance(default, (int, float)) and not isinstance(value, (int, float))):
            raise ConfigError(f"{where}.{name}: expected {type(default).__name__}, got {type(value).__name__}")
        elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            raise ConfigError(f"{where}.{name}: expected an integer")
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(defaults, **kwargs) if kwargs else defaults
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def merge_overrides(base: RunConfig, data: dict) -> RunConfig:
    """Apply a (possibly partial) JSON object on top of ``base``; unspecified values keep ``base``."""
    merged = _deep_merge(asdict(base), data)
    return _build(RunConfig, merged, "config")


def _deep_merge(base: dict, update: dict) -> dict:
    if not isinstance(update, dict):
        raise ConfigError("config: expected an object")
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path, preset: str = "desk") -> RunConfig:
    """Read a JSON config. A top-level ``"preset"`` key chooses the base ("desk" by default)."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    preset = data.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    return merge_overrides(PRESETS[preset](), data)
