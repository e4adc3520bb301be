"""Flat ``key = value`` configuration with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .dsp import StftConfig
from .errors import ConfigError
from .nnet import TrainConfig


@dataclass(frozen=True)
class Config:
    sample_rate: int = 16_000
    segment_len: int = 57_600
    window_len: int = 512
    hop: int = 256
    mel_bins_handcrafted: int = 26
    mel_bins_image: int = 128
    mel_bins_audio: int = 64
    mfcc_coeffs: int = 14
    features: str = "logmel"  # hand-crafted set for the DNN: logmel | mfcc
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_step: int = 10
    mixup: bool = True
    beta_shape: float = 1.0
    pos_weight: str = "auto"  # auto (neg/pos) | pos_over_neg | <number>
    target_sensitivity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.features not in ("logmel", "mfcc"):
            raise ConfigError(f"features must be logmel or mfcc, got {self.features!r}")
        if self.segment_len < self.window_len:
            raise ConfigError("segment_len shorter than one STFT window")
        for name in ("sample_rate", "segment_len", "epochs", "batch_size", "lr_step"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.target_sensitivity <= 1:
            raise ConfigError("target_sensitivity must be in (0, 1]")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop, self.sample_rate)

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.lr_decay, self.lr_step,
                           self.mixup, self.beta_shape, self.pos_weight)

    @property
    def n_frames(self) -> int:
        return self.stft.n_frames(self.segment_len)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


_TYPES = {f.name: f.type for f in fields(Config)}


def parse_overrides(pairs: dict) -> dict:
    out = {}
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, _TYPES[key], str(raw))
    return out


def parse_config(text: str, base: Config | None = None) -> Config:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return (base or Config()).replace(**parse_overrides(pairs))


def load_config(path, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def config_from_dict(d: dict) -> Config:
    return Config().replace(**parse_overrides({k: (str(v).lower() if isinstance(v, bool) else v)
                                               for k, v in d.items()}))
