"""Backbones with binarized interiors: ResNet-20, ResNet-18 (Bi-Real shortcuts) and VGG-Small."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import functional as F
from .autograd import ConfigError, ShapeError, Tensor
from .binary import BinaryConv2d
from .nn import (AvgPool2d, BatchNorm2d, Conv2d, Linear, MaxPool2d, Module, activation, traced_add,
                 traced_global_pool)
from .recover import RecoveryConfig, Tap, TapSet, build_head
from .restrict import IResConfig

BACKBONES = ("resnet20", "resnet18", "vgg_small")


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "resnet20"
    width_multiplier: Fraction = Fraction(1)
    num_classes: int = 10
    input_size: tuple[int, int] = (32, 32)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    ires: IResConfig = field(default_factory=IResConfig)
    binarize: bool = True
    activation: str = "auto"
    stem: str = "auto"
    binarize_shortcut: bool = False
    scale_weights: bool = False
    scale_activations: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.name not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.name!r}")
        object.__setattr__(self, "width_multiplier", Fraction(self.width_multiplier))
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.activation not in ("auto", "hardtanh", "prelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.stem not in ("auto", "cifar", "imagenet"):
            raise ConfigError(f"unknown stem {self.stem!r}")

    @property
    def small_input(self) -> bool:
        return max(self.input_size) <= 64

    @property
    def act_kind(self) -> str:
        if self.activation != "auto":
            return self.activation
        return "hardtanh" if self.small_input else "prelu"

    @property
    def stem_kind(self) -> str:
        if self.stem != "auto":
            return self.stem
        return "cifar" if self.small_input else "imagenet"

    def channels(self, base: int) -> int:
        scaled = base * self.width_multiplier
        if scaled.denominator != 1 or scaled < 1:
            raise ConfigError(f"width multiplier {self.width_multiplier} turns {base} channels into {scaled}")
        return int(scaled)


@dataclass
class ForwardResult:
    logits: Tensor
    penultimate: Tensor
    taps: list[Tensor]


def _halve(size: int, where: str) -> int:
    if size % 2:
        raise ConfigError(f"{where}: odd spatial size {size} cannot be downsampled by 2")
    return size // 2


class BiRealUnit(Module):
    """act(BN(binconv(x)) + shortcut(x)); every 3x3 conv carries its own shortcut."""

    def __init__(self, cin: int, cout: int, stride: int, spec: BackboneSpec, rng: np.random.Generator):
        super().__init__()
        if spec.binarize:
            self.conv = BinaryConv2d(cin, cout, 3, stride, 1, spec.scale_weights, spec.scale_activations, rng=rng)
        else:
            self.conv = Conv2d(cin, cout, 3, stride, 1, interior=True, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.pool = AvgPool2d(2) if stride == 2 else None
        if stride != 1 or cin != cout:
            if spec.binarize and spec.binarize_shortcut:
                self.sc_conv = BinaryConv2d(cin, cout, 1, rng=rng)
            else:
                self.sc_conv = Conv2d(cin, cout, 1, rng=rng)
            self.sc_bn = BatchNorm2d(cout)
        else:
            self.sc_conv = self.sc_bn = None
        self.act = activation(spec.act_kind, cout)

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn(self.conv(x))
        shortcut = x
        if self.pool is not None:
            shortcut = self.pool(shortcut)
        if self.sc_conv is not None:
            shortcut = self.sc_bn(self.sc_conv(shortcut))
        return self.act(traced_add(f"{self.path}.add", out, shortcut))


class ResNet(Module):
    """Bi-Real style ResNet; real-valued stem conv and classifier, binary interior."""

    def __init__(self, spec: BackboneSpec, widths, units_per_stage: int, strides):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        widths = [spec.channels(c) for c in widths]
        act = spec.act_kind
        h, w = spec.input_size
        if spec.stem_kind == "cifar":
            self.stem_conv = Conv2d(3, widths[0], 3, 1, 1, rng=rng)
            self.stem_pool = None
        else:
            self.stem_conv = Conv2d(3, widths[0], 7, 2, 3, rng=rng)
            self.stem_pool = MaxPool2d(3, 2, 1)
            h, w = F.conv_output_size(h, 7, 2, 3), F.conv_output_size(w, 7, 2, 3)
        self.stem_bn = BatchNorm2d(widths[0])
        self.stem_act = activation(act, widths[0])
        taps = [("stem", widths[0], (h, w))]
        if self.stem_pool is not None:
            h, w = F.conv_output_size(h, 3, 2, 1), F.conv_output_size(w, 3, 2, 1)
        self.stages = []
        cin = widths[0]
        for si, (cout, stride) in enumerate(zip(widths, strides)):
            stage = []
            for ui in range(units_per_stage):
                s = stride if ui == 0 else 1
                if s == 2:
                    h, w = _halve(h, f"stage {si}"), _halve(w, f"stage {si}")
                stage.append(BiRealUnit(cin, cout, s, spec, rng))
                cin = cout
            self.stages.append(stage)
            if si < len(widths) - 1:
                taps.append((f"stages.{si}", cout, (h, w)))
        self.tapset = TapSet(tuple(Tap(n, c, sz) for n, c, sz in taps), (cin, h, w))
        self.head = build_head(spec.recovery, self.tapset, act, rng)
        self.fc = Linear(cin, spec.num_classes, rng=rng)
        self.assign_paths()

    def _children(self):
        for name, value in vars(self).items():
            if name == "stages":
                continue
            if isinstance(value, Module):
                yield name, value
        for si, stage in enumerate(self.stages):
            for ui, unit in enumerate(stage):
                yield f"stages.{si}.{ui}", unit

    def forward(self, x: Tensor) -> ForwardResult:
        if x.shape[1:] != (3,) + tuple(self.spec.input_size):
            raise ShapeError(f"expected input (N,3,{self.spec.input_size[0]},{self.spec.input_size[1]}), got {x.shape}")
        out = self.stem_act(self.stem_bn(self.stem_conv(x)))
        taps = [out]
        if self.stem_pool is not None:
            out = self.stem_pool(out)
        for si, stage in enumerate(self.stages):
            for unit in stage:
                out = unit(out)
            if si < len(self.stages) - 1:
                taps.append(out)
        if self.head is not None:
            out = self.head(taps, out)
        logits = self.fc(traced_global_pool("pool", out))
        return ForwardResult(logits, out, taps)


class VGGSmall(Module):
    """Six 3x3 convs (64-64-128-128-256-256 at width 1) with 2x2 max-pooling after each pair."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        act = spec.act_kind
        c = [spec.channels(v) for v in (64, 64, 128, 128, 256, 256)]
        h, w = spec.input_size
        self.conv1 = Conv2d(3, c[0], 3, 1, 1, rng=rng)
        self.bn1 = BatchNorm2d(c[0])
        self.act1 = activation(act, c[0])
        self.convs, self.bns, self.acts = [], [], []
        for i in range(1, 6):
            if spec.binarize:
                conv = BinaryConv2d(c[i - 1], c[i], 3, 1, 1, spec.scale_weights, spec.scale_activations, rng=rng)
            else:
                conv = Conv2d(c[i - 1], c[i], 3, 1, 1, interior=True, rng=rng)
            self.convs.append(conv)
            self.bns.append(BatchNorm2d(c[i]))
            self.acts.append(activation(act, c[i]))
        self.pools = [MaxPool2d(2) for _ in range(3)]
        taps = [("conv1", c[0], (h, w))]
        taps.append(("convs.0", c[1], (h, w)))
        h, w = _halve(h, "pool0"), _halve(w, "pool0")
        taps.append(("convs.2", c[3], (h, w)))
        h, w = _halve(h, "pool1"), _halve(w, "pool1")
        h, w = _halve(h, "pool2"), _halve(w, "pool2")
        self.tapset = TapSet(tuple(Tap(n, ch, sz) for n, ch, sz in taps), (c[5], h, w))
        self.head = build_head(spec.recovery, self.tapset, act, rng)
        self.fc = Linear(c[5] * h * w, spec.num_classes, rng=rng)
        self.assign_paths()

    def forward(self, x: Tensor) -> ForwardResult:
        if x.shape[1:] != (3,) + tuple(self.spec.input_size):
            raise ShapeError(f"expected input (N,3,{self.spec.input_size[0]},{self.spec.input_size[1]}), got {x.shape}")
        out = self.act1(self.bn1(self.conv1(x)))
        taps = [out]
        for i in range(5):
            out = self.acts[i](self.bns[i](self.convs[i](out)))
            if i in (0, 2):
                taps.append(out)
            if i in (0, 2, 4):
                out = self.pools[i // 2](out)
        if self.head is not None:
            out = self.head(taps, out)
        logits = self.fc(F.flatten(out))
        return ForwardResult(logits, out, taps)


def build(spec: BackboneSpec) -> Module:
    if spec.name == "resnet20":
        return ResNet(spec, (16, 32, 64), 6, (1, 2, 2))
    if spec.name == "resnet18":
        return ResNet(spec, (64, 128, 256, 512), 4, (1, 2, 2, 2))
    return VGGSmall(spec)


def forward(model: Module, batch: Tensor) -> ForwardResult:
    return model(batch)


def real_weight_layers(model: Module) -> list[str]:
    """Paths of real-valued conv/linear layers outside the recovery head."""
    out = []
    for name, m in model.named_modules():
        if name.startswith("head"):
            continue
        if isinstance(m, (Conv2d, Linear)):
            out.append(name)
    return out


def binary_layers(model: Module) -> list[str]:
    return [name for name, m in model.named_modules() if isinstance(m, BinaryConv2d)]
