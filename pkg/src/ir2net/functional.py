"""Differentiable tensor operations: elementwise math, convolution, normalization,
pooling, resampling, activations and the classification loss."""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np

from .autograd import ConfigError, ShapeError, Tensor, make_result
from . import counters


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data + b.data
    return make_result("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data - b.data
    return make_result("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_result("div", out, (a, b), backward)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return make_result("pow", out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def absolute(x: Tensor) -> Tensor:
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    return make_result("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result("concat", out, tensors, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result("narrow", x.data[index].copy(), (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts, start = [], 0
    for n in sizes:
        parts.append(narrow(x, axis, start, n))
        start += n
    return parts


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return make_result("relu", x.data * keep, (x,), lambda g: (g * keep,))


def hardtanh(x: Tensor, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result("hardtanh", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel PReLU; `slope` has one entry per channel (axis 1)."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = np.where(pos, g, a * g)
        axes = (0,) + tuple(range(2, x.ndim))
        ga = (g * np.where(pos, 0, x.data)).sum(axis=axes)
        return gx, ga.reshape(slope.shape)

    return make_result("prelu", out, (x, slope), backward)


# ---------------------------------------------------------------- linear / conv

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return make_result("linear", out, inputs, backward)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patches of a (N,C,H,W) array as (C,kh,kw,N,oh,ow); padding is zero-filled."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    xt = x.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def col2im(dcols: np.ndarray, x_shape: tuple, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    _, kh, kw, _, oh, ow = dcols.shape
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j]
    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def _group_slices(c_in: int, c_out: int, groups: int, ragged: bool):
    if c_in % groups:
        raise ConfigError(f"groups={groups} does not divide input channels {c_in}")
    if c_out % groups and not ragged:
        raise ConfigError(f"groups={groups} does not divide output channels {c_out}")
    per_out = -(-c_out // groups)
    if (groups - 1) * per_out >= c_out:
        raise ConfigError(f"{c_out} outputs cannot populate {groups} groups")
    per_in = c_in // groups
    return [(slice(gi * per_in, (gi + 1) * per_in), slice(gi * per_out, min((gi + 1) * per_out, c_out)))
            for gi in range(groups)]


def conv_forward_np(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int = 1,
                    ragged: bool = False):
    """Cross-correlation of x (N,C,H,W) with w (Cout,C/groups,kh,kw); returns (out, cols)."""
    n = x.shape[0]
    c_out, cpg, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, padding)
    oh, ow = cols.shape[4], cols.shape[5]
    flat = cols.reshape(-1, n * oh * ow)
    if groups == 1:
        out = w.reshape(c_out, -1) @ flat
    else:
        out = np.empty((c_out, n * oh * ow), dtype=np.result_type(x, w))
        k = kh * kw
        for sin, sout in _group_slices(x.shape[1], c_out, groups, ragged):
            out[sout] = w[sout].reshape(sout.stop - sout.start, -1) @ flat[sin.start * k:sin.stop * k]
    out = out.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv_backward_np(g: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int,
                     padding: int, groups: int = 1, ragged: bool = False):
    """Gradients (dx, dw) of a convolution given upstream g (N,Cout,oh,ow) and saved cols."""
    c_out = w.shape[0]
    gt = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
    flat = cols.reshape(-1, gt.shape[1])
    if groups == 1:
        w2 = w.reshape(c_out, -1)
        dw = (gt @ flat.T).reshape(w.shape)
        dflat = w2.T @ gt
    else:
        k = w.shape[2] * w.shape[3]
        dw = np.empty_like(w)
        dflat = np.empty_like(flat)
        for sin, sout in _group_slices(x_shape[1], c_out, groups, ragged):
            rows = slice(sin.start * k, sin.stop * k)
            w2 = w[sout].reshape(sout.stop - sout.start, -1)
            dw[sout] = (gt[sout] @ flat[rows].T).reshape(w[sout].shape)
            dflat[rows] = w2.T @ gt[sout]
    dx = col2im(dflat.reshape(cols.shape), x_shape, stride, padding)
    return dx, dw


def check_conv_shapes(x_shape: tuple, w_shape: tuple, stride: int, padding: int, groups: int = 1) -> tuple:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x_shape} and {w_shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    if x_shape[1] != w_shape[1] * groups:
        raise ShapeError(f"conv2d: input has {x_shape[1]} channels, weight expects {w_shape[1] * groups}")
    oh = conv_output_size(x_shape[2], w_shape[2], stride, padding)
    ow = conv_output_size(x_shape[3], w_shape[3], stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d output size {oh}x{ow} is not positive")
    return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1, ragged: bool = False) -> Tensor:
    """Real-valued 2-D cross-correlation with zero padding.

    With ``ragged=True`` the output channel count need not be a multiple of
    ``groups``: each group owns ``ceil(Cout/groups)`` consecutive outputs and the
    last group is truncated.
    """
    check_conv_shapes(x.shape, weight.shape, stride, padding, groups)
    out, cols = conv_forward_np(x.data, weight.data, stride, padding, groups, ragged)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    counters.bump("conv2d")
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx, dw = conv_backward_np(g, cols, weight.data, x.shape, stride, padding, groups, ragged)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_result("conv2d", out, inputs, backward)


# ---------------------------------------------------------------- normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    In training mode batch statistics are used and, if `update_stats`, the running
    estimates are moved by `momentum` (unbiased variance, as is conventional).
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    n, c, h, w = x.shape
    m = n * h * w
    if m == 0:
        raise ConfigError("batchnorm2d over an empty batch")
    shape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv_std.reshape(shape) / m) * (
                m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return make_result("batchnorm2d", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- pooling / resampling

def _patches(x: np.ndarray, k: int, stride: int, padding: int, fill: float) -> np.ndarray:
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    p = np.empty((k * k, n, c, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            p[i * k + j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return p


def _unpatch(dp: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = dp.shape[-2:]
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dp.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dp[i * k + j]
    return dx[:, :, padding:padding + h, padding:padding + w]


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    if conv_output_size(x.shape[2], kernel, stride, padding) < 1:
        raise ConfigError("max_pool2d output is empty")
    p = _patches(x.data, kernel, stride, padding, -np.inf)
    idx = p.argmax(axis=0)
    out = np.take_along_axis(p, idx[None], axis=0)[0]

    def backward(g):
        dp = np.zeros_like(p)
        np.put_along_axis(dp, idx[None], g[None], axis=0)
        return (_unpatch(dp, x.shape, kernel, stride, padding),)

    return make_result("max_pool2d", out, (x,), backward)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    if conv_output_size(x.shape[2], kernel, stride, 0) < 1:
        raise ConfigError("avg_pool2d output is empty")
    p = _patches(x.data, kernel, stride, 0, 0.0)
    area = kernel * kernel
    out = p.mean(axis=0)

    def backward(g):
        dp = np.broadcast_to(g / area, p.shape)
        return (_unpatch(dp, x.shape, kernel, stride, 0),)

    return make_result("avg_pool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    return mean(x, axis=(2, 3))


def adaptive_pool_matrix(size: int, out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages input[floor(i*size/out) : ceil((i+1)*size/out)]."""
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        start = (i * size) // out
        end = -(-((i + 1) * size) // out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def bilinear_matrix(size: int, out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel (align_corners=False) bilinear interpolation weights, shape (out, size)."""
    m = np.zeros((out, size), dtype=dtype)
    scale = size / out
    for i in range(out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _separable(op: str, x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = mh @ x.data @ mw.T
    return make_result(op, out, (x,), lambda g: (mh.T @ g @ mw,))


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"adaptive_avg_pool target {out_h}x{out_w} is not positive")
    if out_h > h or out_w > w:
        raise ConfigError(f"adaptive_avg_pool cannot grow {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    return _separable("adaptive_avg_pool", x, adaptive_pool_matrix(h, out_h), adaptive_pool_matrix(w, out_w))


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"upsample target {out_h}x{out_w} is not positive")
    if out_h < h or out_w < w:
        raise ConfigError(f"upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}")
    return _separable("upsample_bilinear", x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


# ---------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax at the target class."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return make_result("cross_entropy", loss, (logits,), backward)
