"""Run configuration: dataclasses with defaults, INI loading and ``key=value`` overrides.

The INI file has one section per dataclass (``[data]``, ``[model]``, ``[train]``,
``[eval]``). Keys not present keep their defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class DataConfig:
    source_dir: str = ""
    target_dir: str = ""
    manifest: str = ""
    # Held-out target images used as the FID/KID reference set.
    eval_dir: str = ""
    image_size: int = 32
    chroma_shift_range: float = 15.0
    copies_per_sample: int = 8


@dataclass
class ModelConfig:
    image_size: int = 32
    d_content: int = 128
    d_appearance: int = 8
    width: int = 64
    perceptual_extractor: str = "random:0"


@dataclass
class LossWeights:
    recon: float = 10.0
    kl: float = 0.1
    perceptual: float = 1.0
    appearance_recon: float = 1.0
    adversarial: float = 1.0
    relation: float = 1.0


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 32
    batch_size_stage2: int = 16
    batch_size_relation: int = 32
    steps_stage1: int = 2000
    steps_relation: int = 2000
    steps_stage2: int = 1000
    lr_relation: float = 2e-4
    stage1_weights: LossWeights = field(default_factory=LossWeights)
    stage2_weights: LossWeights = field(default_factory=LossWeights)
    disable_relation_loss: bool = False
    disable_stage2_adversarial: bool = False
    stage2_perceptual: bool = False
    relation_joint: bool = False
    warm_start_appearance: bool = True
    warm_start_generator: bool = False
    check_frozen: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.disable_stage2_adversarial and not self.disable_relation_loss:
            raise ConfigError(
                "disable_stage2_adversarial requires disable_relation_loss "
                "(the no-adversarial ablation also drops the relation loss)")
        for name in ("batch_size", "batch_size_stage2", "batch_size_relation"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def variant(self) -> str:
        if self.disable_stage2_adversarial:
            return "no-relation-no-adversarial"
        if self.disable_relation_loss:
            return "no-relation"
        return "full"

    def with_ablation(self, ablation: str) -> "TrainConfig":
        flags = {
            "full": (False, False),
            "no-relation": (True, False),
            "no-relation-no-adversarial": (True, True),
        }
        if ablation not in flags:
            raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(flags)}")
        rel, adv = flags[ablation]
        return dataclasses.replace(self, disable_relation_loss=rel, disable_stage2_adversarial=adv)


@dataclass
class EvalConfig:
    n_generated: int = 1000
    extractor: str = "random:1234"
    manner: str = "rand"
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.model.image_size != self.data.image_size:
            raise ConfigError("data.image_size and model.image_size must agree")

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values: dict[str, dict[str, str]] = {}
        if path is not None:
            parser = configparser.ConfigParser()
            if not parser.read(path, encoding="utf-8"):
                raise ConfigError(f"cannot read config file {path}")
            for section in parser.sections():
                values[section] = dict(parser[section])
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            values.setdefault(section, {})[name] = value.strip()
        return from_sections(values)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name, section in _flatten(self).items():
            parser[name] = {k: _format(v) for k, v in section.items()}
        from io import StringIO
        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for f in fields(cfg):
        sub = getattr(cfg, f.name)
        flat = {}
        for g in fields(sub):
            value = getattr(sub, g.name)
            if dataclasses.is_dataclass(value):
                for h in fields(value):
                    flat[f"{g.name}.{h.name}"] = getattr(value, h.name)
            else:
                flat[g.name] = value
        out[f.name] = flat
    return out


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return raw


def from_sections(values: dict[str, dict[str, str]]) -> RunConfig:
    kwargs = {}
    known = {f.name: f for f in fields(RunConfig)}
    for section, items in values.items():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
    for name, f in known.items():
        sub_cls = f.default_factory
        sub_default = sub_cls()
        sub_kwargs = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, raw in values.get(name, {}).items():
            head, dot, tail = key.partition(".")
            if not hasattr(sub_default, head):
                raise ConfigError(f"unknown key {name}.{key}")
            current = getattr(sub_default, head)
            if dot:
                if not dataclasses.is_dataclass(current) or not hasattr(current, tail):
                    raise ConfigError(f"unknown key {name}.{key}")
                nested.setdefault(head, {})[tail] = _coerce(raw, getattr(current, tail))
            else:
                if dataclasses.is_dataclass(current):
                    raise ConfigError(f"{name}.{key} is a group; set {name}.{key}.<field>")
                sub_kwargs[head] = _coerce(raw, current)
        for head, items in nested.items():
            sub_kwargs[head] = dataclasses.replace(getattr(sub_default, head), **items)
        try:
            kwargs[name] = sub_cls(**sub_kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    return RunConfig(**kwargs)
