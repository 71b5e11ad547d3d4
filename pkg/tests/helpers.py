"""Shared oracles for the test suite."""

import numpy as np

from ir2net import functional as F
from ir2net.autograd import Tensor, backward, fresh_tape


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, inputs, eps=1e-6, seed=0):
    """Largest relative error between tape gradients and central differences.

    `fn` maps a list of Tensors to a Tensor; the scalar checked is sum(out * R)
    for a fixed random R so every output element participates.
    """
    rs = np.random.default_rng(seed)
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with fresh_tape():
        out = fn(leaves)
        proj = rs.standard_normal(out.shape)
        loss = F.sum(F.mul(out, Tensor(proj)))
        backward(loss)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with fresh_tape():
                up = float(np.sum(fn(leaves).data * proj))
            flat[i] = orig - eps
            with fresh_tape():
                down = float(np.sum(fn(leaves).data * proj))
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def away_from(x, points, margin=1e-2):
    """Nudge entries of x that lie within `margin` of any kink in `points`."""
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def naive_sign_conv(x, w, stride, padding):
    """Loop-over-offsets cross-correlation of sign(x) and sign(w) with zero padding."""
    sx = np.where(x >= 0, 1, -1).astype(np.int64)
    sw = np.where(w >= 0, 1, -1).astype(np.int64)
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.int64)
    xp[:, :, padding:padding + h, padding:padding + wd] = sx
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out += np.einsum("nchw,oc->nohw", patch, sw[:, :, i, j])
    return out


def grad_cases(seed=0):
    """(name, fn, inputs) for every differentiable op, inputs placed away from kinks."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    pos = np.abs(r(3, 3)) + 0.5
    kinked = away_from(r(2, 3, 4), [0.0])
    clipped = away_from(r(2, 3, 4) * 1.5, [-1.0, 1.0])
    distinct = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) / 10.0
    rm, rv = r(3), np.abs(r(3)) + 0.5
    cases = [
        ("add", lambda t: F.add(t[0], t[1]), [r(3, 4), r(4)]),
        ("sub", lambda t: F.sub(t[0], t[1]), [r(3, 4), r(3, 1)]),
        ("mul", lambda t: F.mul(t[0], t[1]), [r(2, 3), r(2, 3)]),
        ("div", lambda t: F.div(t[0], t[1]), [r(3, 3), pos]),
        ("power", lambda t: F.power(t[0], 3.0), [r(3, 3)]),
        ("log", lambda t: F.log(t[0]), [pos]),
        ("exp", lambda t: F.exp(t[0]), [r(3, 3)]),
        ("absolute", lambda t: F.absolute(t[0]), [kinked]),
        ("matmul", lambda t: F.matmul(t[0], t[1]), [r(3, 4), r(4, 2)]),
        ("sum", lambda t: F.sum(t[0], axis=1, keepdims=True), [r(3, 5)]),
        ("mean", lambda t: F.mean(t[0], axis=(0, 2)), [r(2, 3, 4)]),
        ("reshape", lambda t: F.reshape(t[0], (4, 3)), [r(2, 6)]),
        ("flatten", lambda t: F.flatten(t[0]), [r(2, 3, 2, 2)]),
        ("concat", lambda t: F.concat([t[0], t[1]], axis=1), [r(2, 3, 2), r(2, 1, 2)]),
        ("narrow", lambda t: F.narrow(t[0], 1, 1, 2), [r(2, 4)]),
        ("split", lambda t: F.concat(F.split(t[0], [1, 3], axis=1)[::-1], axis=1), [r(2, 4)]),
        ("relu", lambda t: F.relu(t[0]), [kinked]),
        ("hardtanh", lambda t: F.hardtanh(t[0]), [clipped]),
        ("prelu", lambda t: F.prelu(t[0], t[1]), [kinked, np.array([0.25, -0.1, 0.5])]),
        ("linear", lambda t: F.linear(t[0], t[1], t[2]), [r(3, 5), r(4, 5), r(4)]),
        ("conv2d", lambda t: F.conv2d(t[0], t[1], t[2], 1, 1), [r(2, 4, 5, 5), r(3, 4, 3, 3), r(3)]),
        ("conv2d_strided", lambda t: F.conv2d(t[0], t[1], None, 2, 0), [r(2, 4, 5, 5), r(2, 4, 3, 3)]),
        ("conv2d_grouped", lambda t: F.conv2d(t[0], t[1], None, 2, 1, 2), [r(2, 4, 5, 5), r(4, 2, 3, 3)]),
        ("conv2d_ragged", lambda t: F.conv2d(t[0], t[1], None, 1, 1, 2, True), [r(2, 4, 4, 4), r(3, 2, 3, 3)]),
        ("batchnorm2d_train", lambda t: F.batchnorm2d(t[0], t[1], t[2], rm.copy(), rv.copy(), True,
                                                      update_stats=False), [r(4, 3, 3, 3), r(3), r(3)]),
        ("batchnorm2d_eval", lambda t: F.batchnorm2d(t[0], t[1], t[2], rm.copy(), rv.copy(), False),
         [r(4, 3, 3, 3), r(3), r(3)]),
        ("max_pool2d", lambda t: F.max_pool2d(t[0], 2), [distinct]),
        ("max_pool2d_padded", lambda t: F.max_pool2d(t[0], 3, 2, 1), [distinct]),
        ("avg_pool2d", lambda t: F.avg_pool2d(t[0], 2), [r(2, 2, 4, 6)]),
        ("global_avg_pool", lambda t: F.global_avg_pool(t[0]), [r(2, 3, 4, 4)]),
        ("adaptive_avg_pool", lambda t: F.adaptive_avg_pool(t[0], 3, 2), [r(1, 2, 7, 5)]),
        ("upsample_bilinear", lambda t: F.upsample_bilinear(t[0], 7, 5), [r(1, 2, 3, 2)]),
        ("cross_entropy", lambda t: F.cross_entropy(t[0], [0, 2, 1]), [r(3, 4)]),
    ]
    return cases


def composed_case(seed=0):
    """conv -> BN -> PReLU -> pool -> linear -> cross-entropy."""
    rng = np.random.default_rng(seed)
    rm, rv = np.zeros(4), np.ones(4)

    def net(t):
        x, w, gamma, beta, slope, fw, fb = t
        h = F.conv2d(x, w, None, 1, 1)
        h = F.batchnorm2d(h, gamma, beta, rm.copy(), rv.copy(), True, update_stats=False)
        h = F.prelu(h, slope)
        h = F.global_avg_pool(h)
        return F.cross_entropy(F.linear(h, fw, fb), [1, 0, 2])

    inputs = [rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((4, 2, 3, 3)),
              1 + 0.1 * rng.standard_normal(4), rng.standard_normal(4), np.full(4, 0.25),
              rng.standard_normal((3, 4)), rng.standard_normal(3)]
    return net, inputs


ACCEPTANCE = {}


class criterion:
    """Context manager recording PASS / FAIL / SKIP for one acceptance criterion and printing it."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            status = "PASS"
        elif exc_type.__name__ == "Skipped":
            status, self.detail = "SKIP", str(exc)
        else:
            status = "FAIL"
            self.detail = (self.detail + "; " if self.detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[self.number] = (status, self.title, self.detail)
        print(f"criterion {self.number}: {status} {self.title} -- {self.detail}")
        return False
