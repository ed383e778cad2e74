"""Run configuration: dataclasses plus a flat ``[section] key = value`` text form.

The same text form is embedded in checkpoints, so a checkpoint alone is
enough to rebuild the model.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Iterable

from .convnet import ConvLayerSpec
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 3
    weight_decay: float = 0.0
    hrnn_lr_mult: float = 1.0
    freeze: tuple[str, ...] = ()     # parameter-name globs with learning rate 0
    flip_augment: bool = False
    threads: int = 1

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.threads < 1:
            raise ConfigError("train.threads must be >= 1")
        return self


@dataclass(frozen=True)
class DataConfig:
    task: str = "synthetic"
    n_train: int = 10000
    n_val: int = 2000
    data_seed: int = 1234
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""

    def validate(self) -> "DataConfig":
        if self.task not in ("synthetic", "idx"):
            raise ConfigError(f"data.task must be 'synthetic' or 'idx', got {self.task!r}")
        return self


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


# ------------------------------------------------------------- formatting


def format_scales(scales) -> str:
    return ",".join(f"{r}x{c}" for r, c in scales)


def parse_scales(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for tok in text.replace(" ", "").split(","):
        if not tok:
            continue
        if "x" in tok:
            r, c = tok.split("x")
            out.append((int(r), int(c)))
        else:
            out.append((int(tok), int(tok)))
    return tuple(out)


def format_conv(layers: Iterable[ConvLayerSpec]) -> str:
    parts = []
    for s in layers:
        pool = f"{s.pool[0]}:{s.pool[1]}" if s.pool else "-"
        parts.append(f"{s.out_channels}:{s.kernel}:{s.stride}:{s.pad}:{'relu' if s.relu else 'linear'}:{pool}")
    return "; ".join(parts)


def parse_conv(text: str) -> tuple[ConvLayerSpec, ...]:
    """``out:kernel:stride:pad:relu|linear:poolwin:poolstride`` (pool ``-`` for none), ``;``-separated."""
    layers = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        tok = part.split(":")
        if len(tok) not in (6, 7) or tok[4] not in ("relu", "linear"):
            raise ConfigError(f"bad conv layer spec {part!r}")
        pool = None if tok[5] == "-" else (int(tok[5]), int(tok[6]))
        layers.append(ConvLayerSpec(int(tok[0]), int(tok[1]), int(tok[2]), int(tok[3]), tok[4] == "relu", pool))
    return tuple(layers)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(kind: type | str, text: str):
    text = text.strip()
    if kind in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def _section_items(obj) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name == "scales":
            out[f.name] = format_scales(v)
        elif f.name == "conv":
            out[f.name] = format_conv(v)
        else:
            out[f.name] = _fmt(v)
    return out


def dump(run: RunConfig) -> str:
    lines = []
    for name in ("model", "train", "data"):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in _section_items(getattr(run, name)).items())
        lines.append("")
    return "\n".join(lines)


def _coerce(cls, key: str, text: str):
    ftypes = {f.name: f.type for f in fields(cls)}
    if key not in ftypes:
        raise ConfigError(f"unknown config key: {cls.__name__.replace('Config', '').lower()}.{key}")
    if key == "scales":
        return parse_scales(text)
    if key == "conv":
        return parse_conv(text)
    t = ftypes[key]
    if t.startswith("tuple[int"):
        return tuple(int(x) for x in text.split(",") if x.strip())
    if t.startswith("tuple[str"):
        return tuple(x.strip() for x in text.split(",") if x.strip())
    return _parse(t, text)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def build(values: dict[str, dict[str, str]]) -> RunConfig:
    parts = {}
    for sec, cls in _SECTIONS.items():
        kw = {k: _coerce(cls, k, v) for k, v in values.get(sec, {}).items()}
        try:
            parts[sec] = cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None
    unknown = set(values) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    run = RunConfig(**parts)
    try:
        run.model.validate()
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None
    run.train.validate()
    run.data.validate()
    return run


def parse_text(text: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def apply_overrides(values: dict[str, dict[str, str]], overrides: Iterable[str]) -> dict[str, dict[str, str]]:
    """Apply ``section.key=value`` strings on top of parsed values."""
    out = {s: dict(v) for s, v in values.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, val = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key needs a section prefix: {key!r}")
        sec, k = key.strip().split(".", 1)
        out.setdefault(sec, {})[k] = val.strip()
    return out


def loads(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    return build(apply_overrides(parse_text(text), overrides))


def replace(run: RunConfig, **sections) -> RunConfig:
    return dataclasses.replace(run, **sections)
