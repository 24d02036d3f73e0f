"""Configuration dataclasses and their JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

SCHEMA_VERSION = 1
CONFIG_ENV_VAR = "CALM_CONFIG"


class ConfigError(ValueError):
    """Raised for invalid shapes, ranges or cross-field constraints."""


def default_tap_layers(num_layers: int) -> list[int]:
    """Quarter points of the stack, e.g. 12 layers -> [3, 6, 9]."""
    taps = sorted({round(k * num_layers / 4) for k in (1, 2, 3)})
    return [t for t in taps if 0 < t < num_layers]


@dataclass
class ModelConfig:
    input_dim: int = 48          # D, raw feature size
    enc_dim: int = 64            # D^enc (projected features share it)
    emb_dim: int = 16            # D^emb
    bias_dim: int = 32           # D^bias
    static_vocab: int = 41       # M, blank at index 0
    num_layers: int = 4          # L
    subsample_factor: int = 2
    tap_layers: Optional[list[int]] = None
    activation: str = "tanh"
    self_condition_weight: float = 1.0
    decoder_dim: int = 32
    decoder_layers: int = 1
    max_decode_len: int = 64
    enroll_dim: Optional[int] = None   # defaults to input_dim

    @property
    def taps(self) -> list[int]:
        if self.tap_layers is None:
            return default_tap_layers(self.num_layers)
        return list(self.tap_layers)

    @property
    def enroll_size(self) -> int:
        return self.input_dim if self.enroll_dim is None else self.enroll_dim

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.static_vocab < 2:
            raise ConfigError("static_vocab must be >= 2 (blank + one symbol)")
        if self.subsample_factor < 1:
            raise ConfigError("subsample_factor must be >= 1")
        if sorted(set(self.taps)) != self.taps:
            raise ConfigError("tap_layers must be strictly increasing")
        for t in self.taps:
            if not 0 < t < self.num_layers:
                raise ConfigError(f"tap layer {t} outside (0, {self.num_layers})")
        if self.activation not in ("tanh", "relu", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.decoder_layers != 1:
            raise ConfigError("only a single decoder block is supported")
        for name in ("input_dim", "enc_dim", "emb_dim", "bias_dim", "decoder_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class LossWeights:
    ctc: float = 0.3
    vad: float = 0.15
    interctc: float = 0.5

    @property
    def attention(self) -> float:
        return 1.0 - self.ctc - self.vad

    def validate(self) -> None:
        for name in ("ctc", "vad", "interctc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"loss weight {name}={v} outside [0, 1]")
        if self.ctc + self.vad > 1.0 + 1e-12:
            raise ConfigError("ctc + vad weights must not exceed 1")


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam_size: int = 4
    mu: float = 0.1

    def validate(self) -> None:
        if self.mode not in ("greedy", "beam"):
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        check_mu(self.mu)


def check_mu(mu: float) -> None:
    if not 0.0 < mu <= 1.0:
        raise ConfigError(f"biasing weight mu={mu} outside (0, 1]")


@dataclass
class BiasListSpec:
    common_set_size: int = 5000   # K
    list_size: int = 100          # N
    scope: str = "per-speaker"    # or "per-utterance"
    unit: str = "word"            # or "character"
    seed: int = 0
    train_list_range: tuple[int, int] = (50, 200)

    def validate(self) -> None:
        if self.common_set_size < 1:
            raise ConfigError("common_set_size must be >= 1")
        if self.list_size < 0:
            raise ConfigError("list_size must be >= 0")
        if self.scope not in ("per-speaker", "per-utterance"):
            raise ConfigError(f"unknown list scope {self.scope!r}")
        if self.unit not in ("word", "character"):
            raise ConfigError(f"unknown unit kind {self.unit!r}")
        lo, hi = self.train_list_range
        if not 0 <= lo <= hi:
            raise ConfigError("train_list_range must satisfy 0 <= lo <= hi")


@dataclass
class SynthConfig:
    """Feature-domain surrogate task."""

    num_mixtures: int = 500
    vocab_size: int = 40           # static symbols, blank excluded
    rare_count: int = 8            # the last `rare_count` symbols are rare
    rare_rate: float = 0.1
    num_speakers: int = 16
    speakers_per_mix: int = 2
    id_dim: int = 8
    frames_per_token: int = 4      # R
    min_tokens: int = 4
    max_tokens: int = 8
    noise_std: float = 0.3
    delay_range: tuple[float, float] = (0.5, 1.5)  # fraction of the first source's length
    enroll_tokens: int = 10
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.vocab_size + self.id_dim

    def validate(self) -> None:
        if not 0 <= self.rare_count < self.vocab_size:
            raise ConfigError("rare_count must be < vocab_size")
        if not 0.0 <= self.rare_rate <= 1.0:
            raise ConfigError("rare_rate outside [0, 1]")
        if self.speakers_per_mix < 1 or self.speakers_per_mix > self.num_speakers:
            raise ConfigError("speakers_per_mix must be in [1, num_speakers]")
        if self.frames_per_token < 1 or self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ConfigError("invalid token/frame counts")
        lo, hi = self.delay_range
        if not 0 <= lo <= hi:
            raise ConfigError("delay_range must satisfy 0 <= lo <= hi")


@dataclass
class MixSpec:
    """Waveform-domain simulation settings."""

    speakers_per_mix: int = 2
    num_mixtures: int = 10
    rate: int = 16000
    delay_seconds: tuple[float, float] = (0.5, 1.5)
    snr_db: Optional[float] = None     # None means no noise
    enroll_seconds: float = 5.0
    seed: int = 0


@dataclass
class OptimConfig:
    step_size: float = 0.2
    epochs: int = 40
    steps: Optional[int] = None        # overrides epochs when set
    batch_size: int = 16
    clip_norm: float = 5.0
    schedule: str = "linear"           # or "constant"; linear decays to zero at the last step
    no_bias_prob: float = 0.0          # chance a training utterance gets an empty list
    seed: int = 0

    def validate(self) -> None:
        if self.step_size < 0:
            raise ConfigError("step_size must be >= 0")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs/steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown step-size schedule {self.schedule!r}")
        if not 0.0 <= self.no_bias_prob <= 1.0:
            raise ConfigError("no_bias_prob outside [0, 1]")


@dataclass
class PathsConfig:
    workdir: str = "work"
    dataset: str = "work/dataset"
    lists: str = "work/lists"
    checkpoint: str = "work/model"
    hypotheses: str = "work/hyp.txt"
    references: str = "work/ref.txt"
    report: str = "work/score.json"
    corpus: Optional[str] = None       # transcripts for build-bias (id TAB text)
    sources: Optional[str] = None      # JSON-lines of single-speaker WAVs for audio simulate


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    task: str = "synth"                # "synth" (feature domain) or "audio"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    bias: BiasListSpec = field(default_factory=BiasListSpec)
    synth: SynthConfig = field(default_factory=SynthConfig)
    mix: MixSpec = field(default_factory=MixSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.task not in ("synth", "audio"):
            raise ConfigError(f"unknown task {self.task!r}")
        self.model.validate()
        self.loss.validate()
        self.decode.validate()
        self.bias.validate()
        self.synth.validate()
        self.optim.validate()
        if self.task == "synth":
            if self.model.input_dim != self.synth.input_dim:
                raise ConfigError("model.input_dim must equal synth vocab_size + id_dim")
            if self.model.static_vocab != self.synth.vocab_size + 1:
                raise ConfigError("model.static_vocab must equal synth vocab_size + 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        path = path or os.environ.get(CONFIG_ENV_VAR)
        if path is None:
            return cls().validate()
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, data: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            value = _build(sub, value)
        elif isinstance(value, list) and isinstance(getattr(cls(), name, None), tuple):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "loss"): LossWeights,
    (ExperimentConfig, "decode"): DecodeConfig,
    (ExperimentConfig, "bias"): BiasListSpec,
    (ExperimentConfig, "synth"): SynthConfig,
    (ExperimentConfig, "mix"): MixSpec,
    (ExperimentConfig, "optim"): OptimConfig,
    (ExperimentConfig, "paths"): PathsConfig,
}


def apply_override(cfg: ExperimentConfig, assignment: str) -> None:
    """Apply ``a.b.c=value`` where value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    target = cfg
    for p in parents:
        if not hasattr(target, p):
            raise ConfigError(f"unknown config path {key!r}")
        target = getattr(target, p)
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config path {key!r}")
    if isinstance(getattr(target, leaf), tuple) and isinstance(value, list):
        value = tuple(value)
    setattr(target, leaf, value)
