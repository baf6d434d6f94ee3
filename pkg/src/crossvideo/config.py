"""Training configuration: dataclasses, strict JSON loading, dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .augment import AugmentConfig
from .errors import ValidationError
from .model import EncoderConfig
from .objective import TERMS


@dataclass
class FinetuneConfig:
    epochs: int = 50
    optimizer: str = "sgd"  # or "adam" (ignores momentum)
    learning_rate: float = 0.01
    encoder_lr_scale: float = 1.0  # encoder learning rate = learning_rate * this
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_clip: Optional[float] = 1.0  # max global gradient norm; None disables
    sequence_length: Optional[int] = None  # crop fine-tune clips to this many frames
    probe_l2: float = 1.0  # inverse regularisation strength of the linear probe
    probe_init: bool = True  # full/scratch runs start from a fitted linear probe
    num_classes: Optional[int] = None


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    warmup_epochs: int = 5
    total_epochs: int = 30
    batch_size: int = 8
    temperature: float = 0.07
    d_proj: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    symmetrize: bool = False  # True averages both anchor directions of the two-view terms
    loss_toggles: dict = field(default_factory=lambda: {t: True for t in TERMS})
    pretrain_sequence_length: Optional[int] = None
    model: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0", "learning_rate")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.total_epochs:
            raise ValidationError("warmup_epochs must be in [0, total_epochs)", "warmup_epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", "batch_size")
        if not self.temperature > 0:
            raise ValidationError("temperature must be > 0", "temperature")
        unknown = set(self.loss_toggles) - set(TERMS)
        if unknown:
            raise ValidationError(f"unknown loss toggles {sorted(unknown)}", "loss_toggles")
        self.model.validate()
        self.augment.validate()
        return self

    def encoder_config(self) -> EncoderConfig:
        d = self.model.to_dict()
        d["projection_dim"] = self.d_proj
        return EncoderConfig.from_dict(d)

    def toggles(self):
        return {t: bool(self.loss_toggles.get(t, True)) for t in TERMS}

    def to_dict(self):
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "")


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {prefix or '<root>'} must be an object", prefix)
    known = {f.name: f for f in fields(cls)}
    unknown = [k for k in data if k not in known]
    if unknown:
        raise ValidationError(f"unknown config key {prefix + unknown[0]!r}", prefix + unknown[0])
    default = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        elif name == "loss_toggles":
            _check_toggles(value, prefix + name)
            bad = set(value) - set(TERMS)
            if bad:
                raise ValidationError(f"unknown loss toggle {sorted(bad)[0]!r}", f"{prefix}loss_toggles")
            kwargs[name] = {t: bool(value.get(t, True)) for t in TERMS}
        else:
            kwargs[name] = _checked(value, current, "Optional" in str(known[name].type), prefix + name)
    return cls(**kwargs)


def _check_toggles(value, key):
    if not isinstance(value, dict) or not all(isinstance(v, bool) for v in value.values()):
        raise ValidationError(f"{key} must map term names to true/false", key)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _checked(value, default, optional, key):
    """Coerce ``value`` to the kind of ``default`` or raise ValidationError."""
    if value is None and (optional or default is None):
        return None
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = _is_number(value) and float(value).is_integer()
        value = int(value) if ok else value
    elif isinstance(default, float) or (default is None and optional):
        ok = _is_number(value)
        value = float(value) if ok and isinstance(default, float) else value
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and len(value) == len(default) and all(_is_number(v) for v in value)
        value = tuple(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ValidationError(f"config key {key!r} has invalid value {value!r}", key)
    return value


def load_config(path=None, overrides=()) -> TrainConfig:
    """Defaults, then the JSON file at ``path``, then ``key.path=value`` overrides."""
    data = TrainConfig().to_dict()
    if path is not None:
        path = Path(path)
        try:
            loaded = json.loads(path.read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}", "config") from exc
        except ValueError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}", "config") from exc
        data = _merge(data, loaded, "")
    for item in overrides:
        data = apply_override(data, item)
    return TrainConfig.from_dict(data).validate()


def _merge(base, update, prefix):
    if not isinstance(update, dict):
        raise ValidationError(f"config section {prefix or '<root>'} must be an object", prefix)
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ValidationError(f"unknown config key {prefix + key!r}", prefix + key)
        if isinstance(base[key], dict) and key != "loss_toggles":
            out[key] = _merge(base[key], value, f"{prefix}{key}.")
        elif key == "loss_toggles":
            _check_toggles(value, prefix + key)
            bad = set(value) - set(TERMS)
            if bad:
                raise ValidationError(f"unknown loss toggle {sorted(bad)[0]!r}", prefix + key)
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


def apply_override(data: dict, item: str) -> dict:
    """Apply one ``dotted.key=value`` override; the key must already exist."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like key=value", item)
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    parts = key.split(".")
    out = json.loads(json.dumps(data))
    node = out
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ValidationError(f"unknown config key {key!r}", key)
        if i == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]
    return out


def save_config(config: TrainConfig, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
