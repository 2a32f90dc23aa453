"""Training configuration and its flat ``section.key = value`` text format.

Example::

    # lines starting with '#' are comments
    train.total_steps = 800
    fusion.mode = pf
    model.channels = 16,32,64,128
    axes.temporal = false
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .consistency import AxisToggles
from .fusion import FusionConfig
from .losses import LossWeights
from .model import ModelConfig


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-3
    min_lr: float = 0.0
    total_steps: int = 800
    lr_cycles: int = 1
    seed: int = 0
    grad_clip: float = 5.0
    label_fraction: float = 1.0
    holdout_fraction: float = 0.2
    split_seed: int = 0  # fixes the held-out test split independently of ``seed``
    buffer_depth: int = 1
    eval_every: int = 0
    ms_loss: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    axes: AxisToggles = field(default_factory=AxisToggles)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.total_steps < 1 or self.lr_cycles < 1:
            raise ValueError("total_steps and lr_cycles must be positive")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.loss.warmup_steps is None:
            self.loss.warmup_steps = max(1, math.ceil(0.3 * self.total_steps))
        if self.total_steps < self.loss.warmup_steps:
            raise ValueError(
                f"total_steps ({self.total_steps}) must be >= warmup_steps ({self.loss.warmup_steps})"
            )


SECTIONS = {"train": TrainConfig, "model": ModelConfig, "fusion": FusionConfig,
            "loss": LossWeights, "axes": AxisToggles}


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in SECTIONS}


def valid_keys() -> list[str]:
    return [f"{sec}.{name}" for sec, cls in SECTIONS.items() for name in _field_types(cls)]


def _parse_value(raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(hint)):
        if raw.lower() in ("none", ""):
            return None
        return _parse_value(raw, args[0])
    if origin is tuple:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if hint is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def to_flat(config: TrainConfig) -> dict[str, str]:
    flat = {}
    for sec, cls in SECTIONS.items():
        obj = config if sec == "train" else getattr(config, sec)
        for name in _field_types(cls):
            flat[f"{sec}.{name}"] = _format_value(getattr(obj, name))
    return flat


def from_flat(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Override ``base`` (defaults if None) with dotted keys; unknown keys are rejected.

    Changing ``train.total_steps`` without naming ``loss.warmup_steps``
    re-derives the warmup from the new step count.
    """
    known = valid_keys()
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise KeyError(f"unknown config key(s) {unknown}; valid keys: {', '.join(known)}")
    current = to_flat(base) if base is not None else {}
    if "train.total_steps" in values and "loss.warmup_steps" not in values:
        current.pop("loss.warmup_steps", None)
    current.update(values)
    parts = {sec: {} for sec in SECTIONS}
    for key, raw in current.items():
        sec, name = key.split(".", 1)
        try:
            parts[sec][name] = _parse_value(raw, _field_types(SECTIONS[sec])[name])
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {exc}") from exc
    subs = {sec: cls(**parts[sec]) for sec, cls in SECTIONS.items() if sec != "train"}
    return TrainConfig(**parts["train"], **subs)


def parse_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return from_flat(parse_text(Path(path).read_text()), base)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(config).items())


def fingerprint(config: TrainConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()[:16]
