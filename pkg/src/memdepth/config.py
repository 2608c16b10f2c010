"""Architecture and training configuration with ``key = value`` text IO."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    token_channels: int = 32
    stride_product: int = 8
    heads: int = 4
    decoder_scales: int = 3
    max_depth: float = 20.0
    depth_eps: float = 1e-6
    memory_length: int = 4
    memory_lr: float = 0.05

    def __post_init__(self):
        s = self.stride_product
        if s < 2 or s & (s - 1):
            raise ConfigError(f"stride_product must be a power of 2 >= 2, got {s}")
        if self.heads < 1 or self.token_channels % self.heads:
            raise ConfigError(f"token_channels={self.token_channels} not divisible by heads={self.heads}")
        if not 1 <= self.decoder_scales <= self.levels:
            raise ConfigError(f"decoder_scales must be in [1, {self.levels}], got {self.decoder_scales}")
        if self.memory_length < 1:
            raise ConfigError(f"memory_length must be >= 1, got {self.memory_length}")
        if self.max_depth <= 0 or self.depth_eps <= 0:
            raise ConfigError("max_depth and depth_eps must be positive")

    @property
    def levels(self) -> int:
        return self.stride_product.bit_length() - 1


@dataclass(frozen=True)
class Variant:
    """Ablation switches; the default is the full model."""

    memory: bool = True
    carry: bool = True
    flow_decoder: bool = True
    sliding_window: bool = False

    @classmethod
    def monocular(cls) -> "Variant":
        return cls(memory=False, carry=False, flow_decoder=False)


@dataclass(frozen=True)
class TrainConfig:
    T: int = 8
    epochs: int = 10
    batch_size: int = 1
    lr_start: float = 4e-5
    lr_end: float = 4e-6
    r_max: int = 4
    seed: int = 0
    warmup_epochs: int | None = None
    warmup_fraction: float = 0.2
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.r_max < 1:
            raise ConfigError(f"r_max must be >= 1, got {self.r_max}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")

    @property
    def n_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return min(self.warmup_epochs, self.epochs)
        return int(round(self.warmup_fraction * self.epochs))


def _coerce(cls, key: str, text: str):
    for f in fields(cls):
        if f.name == key:
            kind = f.type if isinstance(f.type, str) else f.type.__name__
            break
    else:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    try:
        if "bool" in kind:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if "None" in kind and text.lower() == "none":
            return None
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def build(cls, values: dict[str, str], base=None):
    """Instantiate ``cls`` from string values, layered over ``base``."""
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, text in values.items():
        kwargs[key] = _coerce(cls, key, text)
    return cls(**kwargs)


def split_sections(values: dict[str, str]) -> tuple[dict, dict, dict]:
    """Route keys to (ArchConfig, TrainConfig, Variant); unknown keys raise."""
    names = [{f.name for f in fields(c)} for c in (ArchConfig, TrainConfig, Variant)]
    parts: tuple[dict, dict, dict] = ({}, {}, {})
    for key, value in values.items():
        for i, known in enumerate(names):
            if key in known:
                parts[i][key] = value
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return parts


def format_kv(obj) -> str:
    lines = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv(p.read_text())
