"""Training configuration and the plain ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .encoder import PoolMode
from .errors import ConfigError


class TerMode(str, Enum):
    OFF = "Off"
    ETE_ONLY = "EteOnly"
    ETE_PLUS_TEL = "EtePlusTel"


class Paradigm(str, Enum):
    END2END = "End2End"
    PRETRAIN_THEN_SFT = "PretrainThenSFT"


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_epochs: int = 10
    total_epochs: int = 60
    batch_size: int = 16
    # ``lambda`` in config files and on the command line
    lam: float = 0.01
    temperature: float = 0.07
    optimizer: str = "adam"
    sft_optimizer: str = "adamw"
    weight_decay: float = 0.01
    seed: int = 0
    pool_mode: PoolMode = PoolMode.TLF
    paradigm: Paradigm = Paradigm.PRETRAIN_THEN_SFT
    ter_mode: TerMode = TerMode.ETE_PLUS_TEL
    # model shape
    dim: int = 32
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 2
    fusion_layers: int = 1
    use_cls: bool = True
    use_geometry: bool = True
    # "pre": entropy loss on encoder output, "post": on the ETE output
    tel_features: str = "pre"
    freeze_encoders: bool = False
    sft_stations_per_batch: int = 4
    match_temperature: float = 0.2

    def __post_init__(self):
        for name in ("pool_mode", "paradigm", "ter_mode"):
            enum_type = {"pool_mode": PoolMode, "paradigm": Paradigm, "ter_mode": TerMode}[name]
            val = getattr(self, name)
            if not isinstance(val, enum_type):
                try:
                    object.__setattr__(self, name, enum_type(val))
                except ValueError:
                    choices = ", ".join(m.value for m in enum_type)
                    raise ConfigError(f"{name}={val!r}; expected one of {choices}") from None
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs={self.warmup_epochs} must be in [0, total_epochs={self.total_epochs})"
            )
        if self.temperature <= 0 or self.match_temperature <= 0:
            raise ConfigError("temperatures must be > 0")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive training")
        if self.tel_features not in ("pre", "post"):
            raise ConfigError("tel_features must be 'pre' or 'post'")
        if self.pool_mode is not PoolMode.TLF and not self.use_cls:
            raise ConfigError(f"pool_mode={self.pool_mode.value} requires use_cls=true")
        if self.optimizer.lower() not in ("adam", "adamw") or self.sft_optimizer.lower() not in ("adam", "adamw"):
            raise ConfigError("optimizers must be adam or adamw")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.ter_mode is TerMode.ETE_PLUS_TEL else 0.0

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[_KEY_ALIASES.get(f.name, f.name)] = val.value if isinstance(val, Enum) else val
        return out


_KEY_ALIASES = {"lam": "lambda"}
_FIELD_FOR_KEY = {v: k for k, v in _KEY_ALIASES.items()}


def field_types(cls=TrainConfig) -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        out[f.name] = hints.get(t, str)
    return out


def parse_value(key: str, raw: str, cls=TrainConfig) -> Any:
    name = _FIELD_FOR_KEY.get(key, key)
    types = field_types(cls)
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def build_config(values: Mapping[str, str], base: TrainConfig | None = None, cls=TrainConfig):
    """Apply raw string ``values`` (config-file or CLI) on top of ``base``."""
    kwargs = {}
    for key, raw in values.items():
        kwargs[_FIELD_FOR_KEY.get(key, key)] = parse_value(key, raw, cls)
    if base is None:
        return cls(**kwargs)
    return dataclasses.replace(base, **kwargs)


def write_kv(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
