"""Adam / SGD over named parameters, learning-rate schedules and latent-weight clipping."""

from __future__ import annotations

import math

import numpy as np

from .nn import Module, Parameter


class Optimizer:
    def __init__(self, model: Module, lr: float, weight_decay: float = 0.0, clip_binary: bool = True):
        self.params: dict[str, Parameter] = dict(model.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0
        self.state: dict[str, np.ndarray] = {}
        # latent weights of binary layers stay in [-1, 1], where the STE passes gradient
        from .binary import BinaryConv2d, BinaryLinear
        self.clipped = set()
        if clip_binary:
            for name, mod in model.named_modules():
                if isinstance(mod, (BinaryConv2d, BinaryLinear)):
                    self.clipped.add(f"{name}.weight" if name else "weight")

    def _direction(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self) -> None:
        self.steps += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            grad = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            new = p.data - self.lr * self._direction(name, grad)
            if name in self.clipped:
                np.clip(new, -1.0, 1.0, out=new)
            p.assign(new)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v for k, v in sorted(self.state.items())}
        out["__steps__"] = np.array([self.steps], dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        self.steps = int(state.pop("__steps__")[0])
        self.state = {k: np.array(v) for k, v in state.items()}


class SGD(Optimizer):
    def __init__(self, model: Module, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_binary: bool = True):
        super().__init__(model, lr, weight_decay, clip_binary)
        self.momentum = momentum

    def _direction(self, name, grad):
        if not self.momentum:
            return grad
        key = f"{name}:momentum"
        buf = self.state.get(key)
        buf = grad.copy() if buf is None else self.momentum * buf + grad
        self.state[key] = buf
        return buf


class Adam(Optimizer):
    def __init__(self, model: Module, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_binary: bool = True):
        super().__init__(model, lr, weight_decay, clip_binary)
        self.beta1, self.beta2 = betas
        self.eps = eps

    def _direction(self, name, grad):
        m = self.state.get(f"{name}:m", np.zeros_like(grad))
        v = self.state.get(f"{name}:v", np.zeros_like(grad))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[f"{name}:m"], self.state[f"{name}:v"] = m, v
        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg, model: Module) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(model, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def scheduled_lr(kind: str, base_lr: float, step: int, total_steps: int, steps_per_epoch: int = 1,
                 step_size: int = 30, gamma: float = 0.1) -> float:
    """Learning rate for 0-based optimizer step `step`.

    cosine: base * (1 + cos(pi * step / total)) / 2, annealed per step to 0 at the end.
    step:   base * gamma ** (epoch // step_size).
    """
    if kind == "constant":
        return base_lr
    if kind == "cosine":
        t = min(step, total_steps) / max(total_steps, 1)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    if kind == "step":
        return base_lr * gamma ** ((step // max(steps_per_epoch, 1)) // step_size)
    raise ValueError(f"unknown schedule {kind!r}")
