"""Run configuration: ``key=value`` lines with ``#`` comments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "chat"
    chunk_size: int = 12
    left_context: int = 6
    num_heads: int = 4
    d_enc: int = 32
    d_pred: int = 32
    d_joint: int = 32
    vocab_size: int = 16
    stack_factor: int = 1
    lr: float = 0.03
    steps: int = 1000
    batch: int = 8
    seed: int = 0
    max_symbols_per_step: int = 10
    data: str = ""
    output_dir: str = "out"
    # toy-model knobs beyond the core set
    num_sa_layers: int = 1
    num_heads_enc: int = 2
    context_size: int = 1
    frame_duration_ms: float = 10.0
    input_dim: int = 0  # 0: take it from the data file
    eval_every: int = 0  # 0: never evaluate training-set WER during training

    def validate(self) -> RunConfig:
        if self.variant not in ("rnnt", "chat"):
            raise ConfigError(f"variant must be 'rnnt' or 'chat', got {self.variant!r}")
        positive = ("chunk_size", "num_heads", "d_enc", "d_pred", "d_joint", "vocab_size", "stack_factor",
                    "batch", "max_symbols_per_step", "num_heads_enc", "context_size")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("left_context", "steps", "num_sa_layers", "input_dim", "eval_every", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not self.frame_duration_ms > 0:
            raise ConfigError(f"frame_duration_ms must be > 0, got {self.frame_duration_ms}")
        if self.d_enc % self.num_heads_enc:
            raise ConfigError(f"d_enc={self.d_enc} not divisible by num_heads_enc={self.num_heads_enc}")
        if self.variant == "chat":
            if self.d_joint % self.num_heads:
                raise ConfigError(f"d_joint={self.d_joint} not divisible by num_heads={self.num_heads}")
            if self.d_pred != self.d_joint:
                raise ConfigError(f"chat needs d_pred == d_joint, got {self.d_pred} and {self.d_joint}")
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    cast = _CASTS[_TYPES[key]]
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {_TYPES[key]}") from None


def parse_config(text: str, overrides: Mapping[str, str] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def load_config(path: str | Path | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)
