"""Binarization and the bit-packed XNOR/popcount convolution engine.

Bit convention: a set bit encodes +1, a clear bit -1. Bits are packed
LSB-first into little-endian 64-bit words along the last (channel) axis.
Every packed operand carries a lane mask; lanes that hold no real element
(word tail, spatial zero-padding) are 0 in both the data words and the mask,
so a dot product over n valid lanes is ``2*popcount(~(a ^ w) & mask) - popcount(mask)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from . import functional as F
from .autograd import ShapeError, Tensor, make_result
from .nn import Module, Parameter, _kaiming

WORD_BITS = 64


def _sign_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)


def surrogate_grad(x: np.ndarray) -> np.ndarray:
    """Piecewise-polynomial derivative estimate of sign(): 2+2x on [-1,0), 2-2x on [0,1), else 0."""
    # both polynomial pieces equal 2 - 2|x| and reach 0 at |x| = 1
    return np.maximum(2 - 2 * np.abs(x), 0).astype(x.dtype, copy=False)


def approx_sign_backward(x, upstream):
    """Upstream gradient times the surrogate derivative at the saved input `x`."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    up = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream)
    return up * surrogate_grad(x)


def sign(x: Tensor) -> Tensor:
    """+1 where x >= 0, -1 elsewhere; backward uses the surrogate derivative."""
    return make_result("sign", _sign_np(x.data), (x,), lambda g: (g * surrogate_grad(x.data),))


def ste_weight_grad(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Straight-through gradient for latent weights, passed only where |w| <= 1."""
    return g * (np.abs(w) <= 1)


# ---------------------------------------------------------------- packing

def _pack_bool(bits: np.ndarray) -> np.ndarray:
    """(…, L) booleans -> (…, ceil(L/64)) uint64 words, element i at bit i % 64 of word i // 64."""
    length = bits.shape[-1]
    nwords = max(1, -(-length // WORD_BITS))
    pad = nwords * WORD_BITS - length
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


@dataclass(frozen=True)
class PackedBitTensor:
    """A {-1,+1} tensor stored at one bit per element, packed along its last axis."""

    logical_shape: tuple
    words: np.ndarray
    lane_mask: np.ndarray

    @property
    def nwords(self) -> int:
        return self.words.shape[-1]

    def unpack(self) -> np.ndarray:
        """Dense ±1 array of `logical_shape` (invalid lanes are dropped)."""
        n = self.logical_shape[-1] if self.logical_shape else 1
        raw = np.ascontiguousarray(self.words).view(np.uint8)
        bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., :n]
        return np.where(bits.astype(bool), 1.0, -1.0).reshape(self.logical_shape)

    def valid_lanes(self) -> int:
        return int(np.bitwise_count(np.broadcast_to(self.lane_mask, self.words.shape)).sum())


def pack(x) -> PackedBitTensor:
    """Pack sign(x) along the last axis; bit set <=> x >= 0."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    shape = data.shape if data.ndim else (1,)
    data = data.reshape(shape)
    words = _pack_bool(data >= 0)
    mask = _pack_bool(np.ones(shape[-1:], dtype=bool))
    mask = np.broadcast_to(mask, words.shape).copy()
    return PackedBitTensor(tuple(shape), words, mask)


def pack_activations(x: np.ndarray, padding: int) -> PackedBitTensor:
    """Pack an (N,C,H,W) activation as channel-packed (N,H+2p,W+2p,words) with padded pixels masked out."""
    n, c, h, w = x.shape
    bits = (x >= 0).transpose(0, 2, 3, 1)
    words = _pack_bool(bits)
    chan_mask = _pack_bool(np.ones(c, dtype=bool))
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding:
        padded = np.zeros((n, hp, wp, words.shape[-1]), dtype=np.uint64)
        padded[:, padding:padding + h, padding:padding + w] = words
        words = padded
    mask = np.zeros((hp, wp, chan_mask.shape[0]), dtype=np.uint64)
    mask[padding:padding + h, padding:padding + w] = chan_mask
    return PackedBitTensor((n, hp, wp, c), words, np.broadcast_to(mask, words.shape))


def pack_weights(w: np.ndarray) -> PackedBitTensor:
    """(Cout,Cin,kh,kw) latent weights -> sign bits packed over Cin as (Cout,kh,kw,words)."""
    return pack(np.ascontiguousarray(w.transpose(0, 2, 3, 1)))


def _popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words).sum(axis=-1, dtype=np.int64)


def xnor_conv(acts: PackedBitTensor, weights: PackedBitTensor, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Integer binary convolution over packed operands; returns (N,Cout,out_h,out_w) int64.

    Per kernel offset the dot product over valid lanes is
    ``popcount(m) - 2*popcount((a ^ w) & m)``. Invalid activation lanes hold 0,
    so ``(a ^ w) & ~m == w & ~m`` and the masked term is obtained as
    ``popcount(a ^ w) - popcount(w & ~m)``; the second part needs no batch axis.
    """
    a_words, a_mask = acts.words, acts.lane_mask[0]
    w_words = weights.words
    c_out, kh, kw = weights.logical_shape[:3]
    n, nw = a_words.shape[0], a_words.shape[-1]
    mismatch = np.zeros((n, out_h, out_w, c_out), dtype=np.int32)
    outside = np.zeros((out_h, out_w, c_out), dtype=np.int32)
    valid = np.zeros((out_h, out_w), dtype=np.int32)
    he, we = stride * (out_h - 1) + 1, stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            a = a_words[:, i:i + he:stride, j:j + we:stride]
            m = a_mask[i:i + he:stride, j:j + we:stride]
            w = w_words[:, i, j]
            if nw == 1:
                mismatch += np.bitwise_count(a[..., 0, None] ^ w[:, 0])
            else:
                mismatch += np.bitwise_count(a[:, :, :, None, :] ^ w).sum(axis=-1, dtype=np.int32)
            outside += _popcount(w & ~m[:, :, None, :]).astype(np.int32)
            valid += _popcount(m).astype(np.int32)
    counts = valid[None, :, :, None] - 2 * (mismatch - outside[None]).astype(np.int64)
    return counts.transpose(0, 3, 1, 2)


def xnor_linear(acts: PackedBitTensor, weights: PackedBitTensor) -> np.ndarray:
    """(N,F) x (Cout,F) packed rows -> (N,Cout) int64 dot products."""
    a, m = acts.words, acts.lane_mask
    agree = ~(a[:, None, :] ^ weights.words[None]) & m[:, None, :]
    return 2 * _popcount(agree) - _popcount(m)[:, None]


# ---------------------------------------------------------------- layers

class BinaryConv2d(Module):
    """Convolution with binarized weights and activations.

    `weight` holds the latent real-valued weights; the forward pass uses only
    their signs. Optional scaling multiplies the integer output by a
    per-output-channel weight scale (mean |w|) and/or a per-layer activation
    scale (mean |x|); both are strictly positive.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, scale_weights: bool = False, scale_activations: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.scale_weights, self.scale_activations = scale_weights, scale_activations
        self.interior = True
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_kaiming(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self._packed: PackedBitTensor | None = None
        self._packed_version = -1

    @property
    def packed_weight(self) -> PackedBitTensor:
        if self._packed is None or self._packed_version != self.weight.version:
            self._packed = pack_weights(self.weight.data)
            self._packed_version = self.weight.version
        return self._packed

    def macs(self, out_shape: tuple) -> int:
        k = self.kernel_size
        return self.out_channels * self.in_channels * k * k * out_shape[2] * out_shape[3]

    def forward(self, x: Tensor) -> Tensor:
        out = binary_conv2d(x, self)
        if counters.tracing_active():
            macs = self.macs(out.shape)
            counters.emit(counters.CostEntry(self.path, "binconv", macs, 0, out.shape[1:], macs, self.interior))
            if self.scale_weights or self.scale_activations:
                elements = int(np.prod(out.shape[1:]))
                counters.emit(counters.CostEntry(f"{self.path}.scale", "scale", 0, elements, out.shape[1:]))
        return out


class BinaryLinear(Module):
    def __init__(self, in_features: int, out_features: int, scale_weights: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.scale_weights, self.scale_activations = scale_weights, False
        self.weight = Parameter(_kaiming(rng, (out_features, in_features), in_features))

    def forward(self, x: Tensor) -> Tensor:
        out = binary_linear(x, self)
        if counters.tracing_active():
            macs = self.in_features * self.out_features
            counters.emit(counters.CostEntry(self.path, "binlinear", macs, 0, out.shape[1:], macs, True))
        return out


def _apply_scaling(out: Tensor, x: Tensor, layer) -> Tensor:
    if layer.scale_weights:
        w = layer.weight
        axes = tuple(range(1, w.ndim))
        alpha = F.mean(F.absolute(w), axis=axes)
        out = F.mul(out, F.reshape(alpha, (1, -1) + (1,) * (out.ndim - 2)))
    if layer.scale_activations:
        out = F.mul(out, F.mean(F.absolute(x)))
    return out


def binary_conv2d(x: Tensor, layer: BinaryConv2d) -> Tensor:
    """sign(x) (*) sign(w) via XNOR/popcount; padded positions contribute 0."""
    w = layer.weight
    oh, ow = F.check_conv_shapes(x.shape, w.shape, layer.stride, layer.padding)
    acts = pack_activations(x.data, layer.padding)
    counts = xnor_conv(acts, layer.packed_weight, layer.stride, oh, ow)
    counters.bump("packed_conv")
    stride, padding = layer.stride, layer.padding

    def backward(g):
        sx = _sign_np(x.data)
        sw = _sign_np(w.data)
        cols = F.im2col(sx, sw.shape[2], sw.shape[3], stride, padding)
        dsx, dsw = F.conv_backward_np(g, cols, sw, x.shape, stride, padding)
        return dsx * surrogate_grad(x.data), ste_weight_grad(w.data, dsw)

    out = make_result("binary_conv2d", counts.astype(x.dtype), (x, w), backward)
    return _apply_scaling(out, x, layer)


def binary_linear(x: Tensor, layer: BinaryLinear) -> Tensor:
    """1x1-convolution semantics on flattened features, computed on packed rows."""
    w = layer.weight
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"binary_linear: input {x.shape} vs weight {w.shape}")
    counts = xnor_linear(pack(x.data), pack(w.data))
    counters.bump("packed_linear")

    def backward(g):
        sx, sw = _sign_np(x.data), _sign_np(w.data)
        return (g @ sw) * surrogate_grad(x.data), ste_weight_grad(w.data, g.T @ sx)

    out = make_result("binary_linear", counts.astype(x.dtype), (x, w), backward)
    return _apply_scaling(out, x, layer)


def dense_sign_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Reference path: float convolution of sign(x) with sign(w), zero padding."""
    out, _ = F.conv_forward_np(_sign_np(x.astype(np.float64)), _sign_np(w.astype(np.float64)), stride, padding)
    return out
