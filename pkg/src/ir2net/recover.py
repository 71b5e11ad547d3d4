"""Information recovery heads: fuse pooled shallow taps with the penultimate map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import functional as F
from .autograd import ConfigError, ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, Module, activation, traced_adaptive_pool

MODES = ("none", "irec", "cirec")
ROUNDING = ("exact", "floor")


@dataclass(frozen=True)
class RecoveryConfig:
    """Fusion-head settings.

    `g` is a positive group count or "CI" (one group per input channel of the
    grouped conv). `rounding="exact"` rejects a reduction ratio that does not
    divide C_n; "floor" uses floor(C_n / r) channels for the bottleneck and lets
    the grouped conv own a ragged last group when C_n - C_n//r is not a
    multiple of g.
    """

    mode: str = "none"
    r: int = 1
    g: int | str = "CI"
    rounding: str = "exact"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"recovery mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.r, (int, np.integer)) or self.r < 1:
            raise ConfigError(f"reduction ratio r must be a positive integer, got {self.r!r}")
        if self.g != "CI" and (not isinstance(self.g, (int, np.integer)) or self.g < 1):
            raise ConfigError(f"group count g must be a positive integer or 'CI', got {self.g!r}")
        if self.rounding not in ROUNDING:
            raise ConfigError(f"rounding must be one of {ROUNDING}, got {self.rounding!r}")

    @property
    def effective_mode(self) -> str:
        # r = 1 leaves no room for a second branch: the compact head is the plain one
        if self.mode == "cirec" and self.r == 1:
            return "irec"
        return self.mode

    def split(self, c_n: int) -> tuple[int, int, int, bool]:
        """(bottleneck channels, spatial-branch channels, groups, ragged) for a C_n-channel output."""
        if self.rounding == "exact" and c_n % self.r:
            raise ConfigError(f"r={self.r} does not divide C_n={c_n}")
        c1 = c_n // self.r
        if c1 < 1:
            raise ConfigError(f"r={self.r} leaves no bottleneck channels for C_n={c_n}")
        c2 = c_n - c1
        groups = c1 if self.g == "CI" else int(self.g)
        if c1 % groups:
            raise ConfigError(f"g={groups} does not divide the grouped conv's {c1} input channels")
        ragged = c2 % groups != 0
        if ragged and self.rounding == "exact":
            raise ConfigError(f"g={groups} does not divide the grouped conv's {c2} output channels")
        if groups > c2:
            raise ConfigError(f"g={groups} exceeds the {c2} output channels of the grouped conv")
        if ragged and (groups - 1) * -(-c2 // groups) >= c2:
            raise ConfigError(f"{c2} outputs in groups of {-(-c2 // groups)} leave the last of {groups} groups empty")
        return c1, c2, groups, ragged


@dataclass(frozen=True)
class Tap:
    layer: str
    channels: int
    size: tuple[int, int]


@dataclass(frozen=True)
class TapSet:
    """Registered shallow feature maps plus the penultimate descriptor (C_n, H_n, W_n)."""

    taps: tuple[Tap, ...]
    last: tuple[int, int, int]
    layers: tuple[str, ...] = field(default=(), compare=False)

    @property
    def fused_in_channels(self) -> int:
        return sum(t.channels for t in self.taps) + self.last[0]


def align_taps(taps: TapSet, features: Sequence[Tensor], path: str = "") -> list[Tensor]:
    """Adaptive-average-pool every tap to the penultimate spatial size."""
    if len(features) != len(taps.taps):
        raise ShapeError(f"{len(features)} feature maps for {len(taps.taps)} taps")
    _, hn, wn = taps.last
    out = []
    for i, (tap, f) in enumerate(zip(taps.taps, features)):
        if f.shape[1] != tap.channels:
            raise ShapeError(f"tap {tap.layer}: {f.shape[1]} channels, expected {tap.channels}")
        if f.shape[2] < hn or f.shape[3] < wn:
            raise ConfigError(f"tap {tap.layer} is {f.shape[2]}x{f.shape[3]}, smaller than {hn}x{wn}")
        out.append(traced_adaptive_pool(f"{path}.pool{i}" if path else f"pool{i}", f, hn, wn))
    return out


def concat_features(aligned: Sequence[Tensor], f_last: Tensor) -> Tensor:
    for f in aligned:
        if f.shape[2:] != f_last.shape[2:]:
            raise ShapeError(f"cannot concatenate {f.shape[2:]} with penultimate {f_last.shape[2:]}")
    return F.concat(list(aligned) + [f_last], axis=1)


class IRecHead(Module):
    """NonLinear(BN(Conv1x1(F_cat))) back to C_n channels."""

    def __init__(self, tapset: TapSet, act: str = "hardtanh", rng: np.random.Generator | None = None):
        super().__init__()
        c_n = tapset.last[0]
        self.tapset = tapset
        self.conv = Conv2d(tapset.fused_in_channels, c_n, 1, rng=rng)
        self.bn = BatchNorm2d(c_n)
        self.act = activation(act, c_n)

    def fuse(self, f_cat: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(f_cat)))

    def forward(self, features: Sequence[Tensor], f_last: Tensor) -> Tensor:
        return self.fuse(concat_features(align_taps(self.tapset, features, self.path), f_last))


class CIRecHead(Module):
    """Bottleneck fusion: a 1x1 conv to C_n/r channels, a 3x3 grouped conv to the
    remaining C_n - C_n/r, and the two concatenated."""

    def __init__(self, tapset: TapSet, cfg: RecoveryConfig, act: str = "hardtanh",
                 rng: np.random.Generator | None = None):
        super().__init__()
        c_n = tapset.last[0]
        c1, c2, groups, ragged = cfg.split(c_n)
        if c1 + c2 != c_n:
            raise ConfigError("channel split does not conserve C_n")
        self.tapset, self.cfg = tapset, cfg
        self.groups = groups
        self.reduce = Conv2d(tapset.fused_in_channels, c1, 1, rng=rng)
        self.reduce_bn = BatchNorm2d(c1)
        self.reduce_act = activation(act, c1)
        self.spatial = Conv2d(c1, c2, 3, padding=1, groups=groups, ragged=ragged, rng=rng)
        self.spatial_bn = BatchNorm2d(c2)
        self.spatial_act = activation(act, c2)

    def fuse(self, f_cat: Tensor) -> Tensor:
        f_channel = self.reduce_act(self.reduce_bn(self.reduce(f_cat)))
        f_spatial = self.spatial_act(self.spatial_bn(self.spatial(f_channel)))
        return F.concat([f_channel, f_spatial], axis=1)

    def forward(self, features: Sequence[Tensor], f_last: Tensor) -> Tensor:
        return self.fuse(concat_features(align_taps(self.tapset, features, self.path), f_last))


def irec_fuse(f_cat: Tensor, head: IRecHead) -> Tensor:
    if f_cat.shape[1] != head.tapset.fused_in_channels:
        raise ShapeError(f"F_cat has {f_cat.shape[1]} channels, head expects {head.tapset.fused_in_channels}")
    return head.fuse(f_cat)


def cirec_fuse(f_cat: Tensor, head: CIRecHead) -> Tensor:
    if f_cat.shape[1] != head.tapset.fused_in_channels:
        raise ShapeError(f"F_cat has {f_cat.shape[1]} channels, head expects {head.tapset.fused_in_channels}")
    return head.fuse(f_cat)


def build_head(cfg: RecoveryConfig, tapset: TapSet, act: str = "hardtanh",
               rng: np.random.Generator | None = None) -> Module | None:
    mode = cfg.effective_mode
    if mode == "none":
        return None
    if mode == "irec":
        return IRecHead(tapset, act, rng)
    return CIRecHead(tapset, cfg, act, rng)
