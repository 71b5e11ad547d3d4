"""Flat key=value run configuration.

A config file is plain text, one ``key = value`` per line; ``#`` starts a
comment and blank lines are ignored. Unknown keys are rejected. Every field
has a default, so an empty file describes the baseline CIFAR ResNet-20 run.

Schema (key: type, default, allowed range)::

    backbone            str       resnet20      resnet20 | resnet18 | vgg_small
    width_multiplier    fraction  1             > 0, e.g. 1/4
    num_classes         int       10            >= 1
    input_size          int       32            >= 8 (square inputs)
    activation          str       auto          auto | hardtanh | prelu
    stem                str       auto          auto | cifar | imagenet
    binarize            bool      true
    binarize_shortcut   bool      false
    scale_weights       bool      false
    scale_activations   bool      false
    recovery            str       none          none | irec | cirec
    r                   int       1             >= 1
    g                   int|CI    CI
    rounding            str       exact         exact | floor
    ires                bool      false
    lam                 float     0.15          [0, 1]
    mu                  float     0.5           [0, 1]
    optimizer           str       adam          adam | sgd
    lr                  float     0.001         (0, 10]
    momentum            float     0.9           [0, 1)      (sgd)
    beta1, beta2        float     0.9, 0.999    [0, 1)      (adam)
    weight_decay        float     0             [0, 1)
    schedule            str       cosine        cosine | step | constant
    step_size           int       30            >= 1 epochs (step schedule)
    gamma               float     0.1           (0, 1] (step schedule)
    epochs              int       1             >= 1
    batch_size          int       128           >= 1
    max_steps           int       0             >= 0; 0 means no limit
    seed                int       0             >= 0
    data_dir            str       synthetic     CIFAR-10 binary dir, or "synthetic"
    train_subset        int       0             >= 0; 0 means the whole split
    test_subset         int       0             >= 0; 0 means the whole split
    augment             bool      false         pad-4 random crop + horizontal flip
    mean                floats    0.4914,0.4822,0.4465
    std                 floats    0.2470,0.2435,0.2616
    output_dir          str       runs/default
    checkpoint_every    int       1             >= 0 epochs; 0 keeps only the final one
    precision           str       standard      standard | wide
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .autograd import ConfigError
from .models import BACKBONES, BackboneSpec
from .recover import RecoveryConfig
from .restrict import IResConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    backbone: str = "resnet20"
    width_multiplier: Fraction = Fraction(1)
    num_classes: int = 10
    input_size: int = 32
    activation: str = "auto"
    stem: str = "auto"
    binarize: bool = True
    binarize_shortcut: bool = False
    scale_weights: bool = False
    scale_activations: bool = False
    recovery: str = "none"
    r: int = 1
    g: int | str = "CI"
    rounding: str = "exact"
    ires: bool = False
    lam: float = 0.15
    mu: float = 0.5
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    schedule: str = "cosine"
    step_size: int = 30
    gamma: float = 0.1
    epochs: int = 1
    batch_size: int = 128
    max_steps: int = 0
    seed: int = 0
    data_dir: str = "synthetic"
    train_subset: int = 0
    test_subset: int = 0
    augment: bool = False
    mean: tuple[float, ...] = (0.4914, 0.4822, 0.4465)
    std: tuple[float, ...] = (0.2470, 0.2435, 0.2616)
    output_dir: str = "runs/default"
    checkpoint_every: int = 1
    precision: str = "standard"

    def __post_init__(self):
        self.width_multiplier = Fraction(self.width_multiplier)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        self.validate()

    def validate(self) -> None:
        def check(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        check(self.backbone in BACKBONES, f"backbone must be one of {BACKBONES}")
        check(self.width_multiplier > 0, "width_multiplier must be positive")
        check(self.num_classes >= 1, "num_classes must be >= 1")
        check(self.input_size >= 8, "input_size must be >= 8")
        check(self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd")
        check(0 < self.lr <= 10, "lr must lie in (0, 10]")
        check(0 <= self.momentum < 1, "momentum must lie in [0, 1)")
        check(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)")
        check(0 <= self.weight_decay < 1, "weight_decay must lie in [0, 1)")
        check(self.schedule in ("cosine", "step", "constant"), "schedule must be cosine, step or constant")
        check(self.step_size >= 1, "step_size must be >= 1")
        check(0 < self.gamma <= 1, "gamma must lie in (0, 1]")
        check(self.epochs >= 1, "epochs must be >= 1")
        check(self.batch_size >= 1, "batch_size must be >= 1")
        check(self.max_steps >= 0, "max_steps must be >= 0")
        check(self.seed >= 0, "seed must be >= 0")
        check(self.train_subset >= 0 and self.test_subset >= 0, "subset sizes must be >= 0")
        check(len(self.mean) == 3 and len(self.std) == 3, "mean and std need three values")
        check(all(s > 0 for s in self.std), "std values must be positive")
        check(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        check(self.precision in ("standard", "wide"), "precision must be standard or wide")
        # the nested configs carry their own checks
        self.recovery_config()
        self.ires_config()

    def recovery_config(self) -> RecoveryConfig:
        return RecoveryConfig(self.recovery, self.r, self.g, self.rounding)

    def ires_config(self) -> IResConfig:
        return IResConfig(self.lam, self.mu, self.ires)

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(
            name=self.backbone, width_multiplier=self.width_multiplier, num_classes=self.num_classes,
            input_size=(self.input_size, self.input_size), recovery=self.recovery_config(),
            ires=self.ires_config(), binarize=self.binarize, activation=self.activation, stem=self.stem,
            binarize_shortcut=self.binarize_shortcut, scale_weights=self.scale_weights,
            scale_activations=self.scale_activations, seed=self.seed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Fraction):
                v = str(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: _coerce(k, v) for k, v in raw.items()}
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {
    "width_multiplier": "fraction", "num_classes": int, "input_size": int, "binarize": bool,
    "binarize_shortcut": bool, "scale_weights": bool, "scale_activations": bool, "r": int, "g": "group",
    "ires": bool, "lam": float, "mu": float, "lr": float, "momentum": float, "beta1": float, "beta2": float,
    "weight_decay": float, "step_size": int, "gamma": float, "epochs": int, "batch_size": int,
    "max_steps": int, "seed": int, "train_subset": int, "test_subset": int, "augment": bool,
    "mean": "floats", "std": "floats", "checkpoint_every": int,
}


def _coerce(key: str, value):
    kind = _FIELD_TYPES.get(key, str)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if kind is float:
            return float(value)
        if kind == "fraction":
            return Fraction(str(value).strip())
        if kind == "group":
            if isinstance(value, str) and value.strip().upper() == "CI":
                return "CI"
            return int(value)
        if kind == "floats":
            if isinstance(value, str):
                return tuple(float(v) for v in value.split(","))
            return tuple(float(v) for v in value)
        return str(value).strip()
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config(text: str) -> TrainConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return TrainConfig.from_dict(raw)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())
