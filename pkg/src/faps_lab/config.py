"""Run configuration: one JSON file with a section per pipeline stage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .synth import CorpusConfig
from .training import TrainConfig
from .vclite import DecoderConfig, ProbeConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    pair_sample_count: int = 1000
    align_pair_count: int = 1000
    conversion_pair_count: int = 500
    probe_steps: int = 400
    probe_learning_rate: float = 0.05
    projection_speakers: int = 5
    projection_frames: int = 30
    skip_labels: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for name in ("pair_sample_count", "align_pair_count", "conversion_pair_count",
                     "projection_speakers", "projection_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"eval.{name} must be >= 1")

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(steps=self.probe_steps, learning_rate=self.probe_learning_rate, seed=self.seed)

    def to_dict(self):
        return asdict(self)


@dataclass
class PathConfig:
    corpus: str = "corpus"
    run: str = "run"

    def to_dict(self):
        return asdict(self)


_SECTIONS = {"corpus": CorpusConfig, "encoder": EncoderConfig, "training": TrainConfig,
             "decoder": DecoderConfig, "eval": EvalConfig, "paths": PathConfig}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    @classmethod
    def from_dict(cls, data: dict, source: str = "<config>") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"{source}: unknown section(s) {', '.join(unknown)}")
        built = {}
        for name, kind in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{source}: section {name!r} must be an object")
            allowed = {f.name for f in fields(kind)}
            bad = sorted(set(section) - allowed)
            if bad:
                raise ConfigError(f"{source}: unknown key(s) in {name}: {', '.join(bad)}")
            try:
                built[name] = kind(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad {name} section: {exc}") from exc
        cfg = cls(**built)
        if cfg.encoder.input_dim != cfg.corpus.feature_dim:
            raise ConfigError(f"{source}: encoder.input_dim {cfg.encoder.input_dim} != "
                              f"corpus.feature_dim {cfg.corpus.feature_dim}")
        if (cfg.decoder.feature_dim, cfg.decoder.speaker_dim) != (cfg.corpus.feature_dim,
                                                                  cfg.corpus.speaker_dim):
            raise ConfigError(f"{source}: decoder dims must match corpus feature_dim/speaker_dim")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, str(path))

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in _SECTIONS}

    def replace(self, section: str, **changes) -> "RunConfig":
        """Copy with some keys of one section overridden (re-validated)."""
        data = self.to_dict()
        data[section].update(changes)
        return RunConfig.from_dict(data)
