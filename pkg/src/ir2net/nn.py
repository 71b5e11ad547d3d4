"""Module system and real-valued layers built on the functional ops."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import counters
from . import functional as F
from .autograd import ConfigError, Tensor, default_dtype

_bn_state = {"frozen": False}


@contextlib.contextmanager
def frozen_bn_stats():
    """BatchNorm layers keep using batch statistics but stop updating running ones."""
    prev = _bn_state["frozen"]
    _bn_state["frozen"] = True
    try:
        yield
    finally:
        _bn_state["frozen"] = prev


class Parameter(Tensor):
    """Trainable leaf tensor; `version` increments on every in-place update."""

    __slots__ = ("version",)

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.version = 0

    def assign(self, values: np.ndarray) -> None:
        self.data[...] = values
        self.version += 1


class Module:
    """Container with attribute-discovered children, parameters and buffers."""

    buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True
        self.path = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            for name in mod.buffer_names:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def assign_paths(self) -> "Module":
        for name, mod in self.named_modules():
            mod.path = name
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.assign(state[name])
        for name, buf in bufs.items():
            buf[...] = state[name]


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _per_sample(shape: tuple) -> int:
    return int(np.prod(shape[1:]))


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = False, ragged: bool = False, interior: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_channels % groups or (out_channels % groups and not ragged):
            raise ConfigError(f"groups={groups} incompatible with {in_channels}->{out_channels} channels")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.groups, self.ragged, self.interior = groups, ragged, interior
        fan_in = in_channels // groups * kernel_size * kernel_size
        self.weight = Parameter(_kaiming(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def macs(self, out_shape: tuple) -> int:
        k = self.kernel_size
        return self.out_channels * (self.in_channels // self.groups) * k * k * out_shape[2] * out_shape[3]

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups, self.ragged)
        if counters.tracing_active():
            macs = self.macs(out.shape)
            counters.emit(counters.CostEntry(self.path, "conv", 0, macs, out.shape[1:], macs, self.interior))
        return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = F.linear(x, self.weight, self.bias)
        if counters.tracing_active():
            macs = self.in_features * self.out_features
            counters.emit(counters.CostEntry(self.path, "linear", 0, macs, out.shape[1:], macs))
        return out


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        out = F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training,
                            self.momentum, self.eps, update_stats=not _bn_state["frozen"])
        if counters.tracing_active():
            counters.emit(counters.CostEntry(self.path, "bn", 0, _per_sample(out.shape), out.shape[1:]))
        return out


class Hardtanh(Module):
    def forward(self, x: Tensor) -> Tensor:
        out = F.hardtanh(x)
        if counters.tracing_active():
            counters.emit(counters.CostEntry(self.path, "act", 0, _per_sample(out.shape), out.shape[1:]))
        return out


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.slope = Parameter(np.full(channels, init))

    def forward(self, x: Tensor) -> Tensor:
        out = F.prelu(x, self.slope)
        if counters.tracing_active():
            counters.emit(counters.CostEntry(self.path, "act", 0, _per_sample(out.shape), out.shape[1:]))
        return out


def activation(kind: str, channels: int) -> Module:
    if kind == "hardtanh":
        return Hardtanh()
    if kind == "prelu":
        return PReLU(channels)
    raise ConfigError(f"unknown activation {kind!r}")


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int | None = None, padding: int = 0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride or kernel, padding

    def forward(self, x: Tensor) -> Tensor:
        out = F.max_pool2d(x, self.kernel, self.stride, self.padding)
        if counters.tracing_active():
            counters.emit(counters.CostEntry(self.path, "maxpool", 0, 0, out.shape[1:]))
        return out


class AvgPool2d(Module):
    def __init__(self, kernel: int, stride: int | None = None):
        super().__init__()
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x: Tensor) -> Tensor:
        out = F.avg_pool2d(x, self.kernel, self.stride)
        if counters.tracing_active():
            cost = _per_sample(out.shape) * self.kernel * self.kernel
            counters.emit(counters.CostEntry(self.path, "pool", 0, cost, out.shape[1:]))
        return out


def traced_add(path: str, a: Tensor, b: Tensor) -> Tensor:
    """Residual addition, charged one FLOP per output element."""
    out = F.add(a, b)
    if counters.tracing_active():
        counters.emit(counters.CostEntry(path, "add", 0, _per_sample(out.shape), out.shape[1:]))
    return out


def traced_global_pool(path: str, x: Tensor) -> Tensor:
    out = F.global_avg_pool(x)
    if counters.tracing_active():
        counters.emit(counters.CostEntry(path, "pool", 0, _per_sample(x.shape), out.shape[1:]))
    return out


def traced_adaptive_pool(path: str, x: Tensor, out_h: int, out_w: int) -> Tensor:
    out = F.adaptive_avg_pool(x, out_h, out_w)
    if counters.tracing_active() and out is not x:
        rows = np.count_nonzero(F.adaptive_pool_matrix(x.shape[2], out_h))
        cols = np.count_nonzero(F.adaptive_pool_matrix(x.shape[3], out_w))
        counters.emit(counters.CostEntry(path, "pool", 0, x.shape[1] * rows * cols, out.shape[1:]))
    return out
