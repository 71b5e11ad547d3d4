"""Information restriction: attention-threshold input masks and the two-pass training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from . import functional as F
from .autograd import ConfigError, ShapeError, Tensor, no_grad
from .nn import frozen_bn_stats


@dataclass(frozen=True)
class IResConfig:
    lam: float = 0.15
    mu: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")


@dataclass(frozen=True)
class AttentionMask:
    """Per-sample binary masks (N,H,W) with the thresholds that produced them."""

    values: np.ndarray
    tau: np.ndarray
    lam: float

    @property
    def keep_fraction(self) -> np.ndarray:
        return self.values.reshape(len(self.values), -1).mean(axis=1)


@dataclass(frozen=True)
class MaskedBatch:
    images: Tensor
    masks: AttentionMask


def attention_map(a_l: Tensor) -> Tensor:
    """Sum over channels of squared activations, (N,C,h,w) -> (N,h,w); off the tape."""
    counters.bump("ires_attention")
    data = a_l.data
    return Tensor((data * data).sum(axis=1), dtype=data.dtype)


def upsampled_attention(f_a: Tensor, target_h: int, target_w: int) -> np.ndarray:
    with no_grad():
        up = F.upsample_bilinear(Tensor(f_a.data[:, None], dtype=f_a.dtype), target_h, target_w)
    return up.data[:, 0]


def make_mask(f_a: Tensor, target_h: int, target_w: int, lam: float) -> AttentionMask:
    """Upsample the attention map and keep pixels at or above lam * (per-sample mean)."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    counters.bump("ires_mask")
    up = upsampled_attention(f_a, target_h, target_w)
    tau = lam * up.reshape(len(up), -1).mean(axis=1)
    values = (up >= tau[:, None, None]).astype(np.uint8)
    return AttentionMask(values, tau, lam)


def apply_mask(batch: Tensor, masks: AttentionMask) -> MaskedBatch:
    """Zero masked pixels in every colour channel; the mask is constant data."""
    if batch.ndim != 4 or batch.shape[0] != masks.values.shape[0] or batch.shape[2:] != masks.values.shape[1:]:
        raise ShapeError(f"mask {masks.values.shape} does not fit batch {batch.shape}")
    counters.bump("ires_apply")
    images = batch.data * masks.values[:, None].astype(batch.dtype)
    return MaskedBatch(Tensor(images, dtype=batch.dtype), masks)


def combined_loss(loss_original: Tensor, loss_masked: Tensor, mu: float) -> Tensor:
    """mu * loss_original + (1 - mu) * loss_masked."""
    if not 0.0 <= mu <= 1.0:
        raise ConfigError(f"mu must lie in [0, 1], got {mu}")
    return F.add(F.mul(loss_original, mu), F.mul(loss_masked, 1.0 - mu))


@dataclass
class StepStats:
    forwards: int
    loss_original: float
    loss_masked: float | None = None
    keep_fraction: float | None = None


def ires_step(model, batch: Tensor, targets, cfg: IResConfig):
    """One training-loss evaluation: original pass, attention masks, masked pass, weighted sum.

    The masked pass uses batch statistics without touching BatchNorm running
    estimates. Returns (loss_total, StepStats); the loss is attached to the tape.
    """
    result = model(batch)
    loss_original = F.cross_entropy(result.logits, targets)
    if not cfg.enabled:
        return loss_original, StepStats(1, loss_original.item())
    f_a = attention_map(result.penultimate)
    masks = make_mask(f_a, batch.shape[2], batch.shape[3], cfg.lam)
    masked = apply_mask(batch, masks)
    with frozen_bn_stats():
        masked_result = model(masked.images)
    loss_masked = F.cross_entropy(masked_result.logits, targets)
    total = combined_loss(loss_original, loss_masked, cfg.mu)
    stats = StepStats(2, loss_original.item(), loss_masked.item(), float(masks.keep_fraction.mean()))
    return total, stats
