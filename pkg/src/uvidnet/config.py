"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DEFAULT_PALETTE, Palette
from .keyframes import DEFAULT_THRESHOLD
from .model import ArchConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    encoder: str = "unet"
    merge: str = "multiplication"
    base_width: int = 64
    num_classes: int = 4
    height: int = 256
    width: int = 256
    one_by_one: str = "single"
    conv_bias: bool = True
    encoder_bn: bool = True
    decoder_bn: bool = True
    palette: str = DEFAULT_PALETTE.format()
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    max_steps: int = 0  # 0 = no limit
    val_every: int = 1
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    source_classes: int = 8

    def arch(self) -> ArchConfig:
        names = {f.name for f in fields(ArchConfig)}
        return ArchConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def train_config(self, **extra) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           max_steps=self.max_steps or None, seed=self.seed, val_every=self.val_every, **extra)

    def get_palette(self) -> Palette:
        return Palette.parse(self.palette)

    def format(self) -> str:
        return "".join(f"{k} = {_show(v)}\n" for k, v in dataclasses.asdict(self).items())


def _show(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(name: str, kind: type, text: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ValueError(f"{name}: expected {kind.__name__}, got {text!r}") from None


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, _TYPES[key], value)
    return values


def resolve(config_path=None, **overrides) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (None = unset)."""
    cfg = RunConfig()
    if config_path is not None:
        path = Path(config_path)
        for k, v in parse_config(path.read_text(encoding="utf-8"), str(path)).items():
            setattr(cfg, k, v)
    for k, v in overrides.items():
        if k not in _TYPES:
            raise ValueError(f"unknown config key {k!r}")
        if v is not None:
            setattr(cfg, k, v)
    cfg.arch().validate()
    cfg.get_palette()
    return cfg
