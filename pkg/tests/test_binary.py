import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ir2net import counters
from ir2net import functional as F
from ir2net.autograd import Tensor, backward, fresh_tape
from ir2net.binary import (BinaryConv2d, BinaryLinear, binary_conv2d, binary_linear, pack, pack_activations,
                           pack_weights, sign, surrogate_grad, xnor_conv)
from helpers import naive_sign_conv


def _layer(rng, cin, cout, k, stride, padding, **kw):
    layer = BinaryConv2d(cin, cout, k, stride, padding, rng=rng, **kw)
    return layer


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=200))
@settings(max_examples=60, deadline=None)
def test_pack_unpack_roundtrip(values):
    x = np.array(values)
    p = pack(x)
    np.testing.assert_array_equal(p.unpack(), np.where(x >= 0, 1.0, -1.0))
    assert p.valid_lanes() == len(values)


def test_pack_bit_order_lsb_first():
    x = np.array([1.0, -1.0, 1.0] + [-1.0] * 61 + [1.0])
    p = pack(x)
    assert p.words.dtype == np.uint64
    assert int(p.words[0]) == 0b101
    assert int(p.words[1]) == 1
    assert int(p.lane_mask[1]) == 1


def test_tail_lanes_are_masked():
    acts = pack_activations(np.ones((1, 70, 2, 2)), padding=1)
    assert acts.words.shape == (1, 4, 4, 2)
    # padding pixels have an all-zero mask, interior pixels 70 valid lanes
    assert int(np.bitwise_count(acts.lane_mask[0, 0, 0]).sum()) == 0
    assert int(np.bitwise_count(acts.lane_mask[0, 1, 1]).sum()) == 70


@pytest.mark.parametrize("cin", [1, 3, 63, 64, 65, 130])
def test_xnor_conv_matches_loop_oracle(rng, cin):
    for stride, padding, k in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)]:
        x = rng.standard_normal((2, cin, 5, 6))
        w = rng.standard_normal((3, cin, k, k))
        layer = BinaryConv2d(cin, 3, k, stride, padding)
        layer.weight.assign(w)
        got = binary_conv2d(Tensor(x), layer).data
        np.testing.assert_array_equal(got.astype(np.int64), naive_sign_conv(x, w, stride, padding))


def test_padding_contributes_zero():
    layer = BinaryConv2d(5, 1, 3, 1, 1)
    layer.weight.assign(np.ones((1, 5, 3, 3)))
    out = binary_conv2d(Tensor(np.ones((1, 5, 4, 4))), layer).data[0, 0]
    assert out[0, 0] == 4 * 5          # corner: 2x2 valid taps
    assert out[0, 1] == 6 * 5          # edge: 2x3
    assert out[1, 1] == 9 * 5          # interior


def test_packed_weights_refresh_after_update(rng):
    layer = _layer(rng, 4, 2, 3, 1, 1)
    first = layer.packed_weight
    assert layer.packed_weight is first
    layer.weight.assign(-layer.weight.data)
    assert layer.packed_weight is not first
    np.testing.assert_array_equal(layer.packed_weight.unpack(),
                                  np.where(layer.weight.data.transpose(0, 2, 3, 1) >= 0, 1.0, -1.0))


def test_binary_forward_uses_packed_kernel_only(rng):
    layer = _layer(rng, 8, 4, 3, 1, 1)
    with counters.counting() as c:
        binary_conv2d(Tensor(rng.standard_normal((1, 8, 4, 4))), layer)
    assert c["packed_conv"] == 1
    assert c["conv2d"] == 0


def test_surrogate_is_derivative_of_polynomial():
    # F(x) = -1 (x<-1), 2x+x^2 (-1<=x<0), 2x-x^2 (0<=x<1), 1 (x>=1)
    def poly(x):
        return np.where(x < -1, -1.0, np.where(x < 0, 2 * x + x * x, np.where(x < 1, 2 * x - x * x, 1.0)))

    xs = np.array([-1.7, -0.9, -0.5, -0.1, 0.1, 0.5, 0.9, 1.3])
    h = 1e-6
    numeric = (poly(xs + h) - poly(xs - h)) / (2 * h)
    np.testing.assert_allclose(surrogate_grad(xs), numeric, atol=1e-6)
    assert surrogate_grad(np.array([0.0]))[0] == 2.0


def test_sign_forward_and_backward(wide):
    x = Tensor(np.array([-2.0, -0.5, 0.0, 0.25, 3.0]), requires_grad=True)
    y = sign(x)
    np.testing.assert_array_equal(y.data, [-1, -1, 1, 1, 1])
    backward(F.sum(y))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 2.0, 1.5, 0.0])


def test_binary_conv_gradients_match_dense_reference(wide, rng):
    x = rng.standard_normal((2, 3, 5, 5)) * 0.8
    layer = _layer(rng, 3, 4, 3, 2, 1)
    w = rng.uniform(-1.4, 1.4, (4, 3, 3, 3))
    layer.weight.assign(w)
    proj = rng.standard_normal((2, 4, 3, 3))
    with fresh_tape():
        xt = Tensor(x, requires_grad=True)
        layer.weight.grad = None
        backward(F.sum(F.mul(binary_conv2d(xt, layer), Tensor(proj))))
        dx, dw = xt.grad, layer.weight.grad
    with fresh_tape():
        sx = Tensor(np.where(x >= 0, 1.0, -1.0), requires_grad=True)
        sw = Tensor(np.where(w >= 0, 1.0, -1.0), requires_grad=True)
        backward(F.sum(F.mul(F.conv2d(sx, sw, None, 2, 1), Tensor(proj))))
    np.testing.assert_allclose(dx, sx.grad * np.maximum(0, 2 - 2 * np.abs(x)))
    np.testing.assert_allclose(dw, sw.grad * (np.abs(w) <= 1))


def test_scaling_factors_are_positive_and_applied(rng):
    layer = _layer(rng, 4, 3, 3, 1, 1, scale_weights=True, scale_activations=True)
    x = rng.standard_normal((1, 4, 4, 4))
    plain = BinaryConv2d(4, 3, 3, 1, 1)
    plain.weight.assign(layer.weight.data)
    counts = binary_conv2d(Tensor(x), plain).data
    scaled = binary_conv2d(Tensor(x), layer).data
    alpha = np.abs(layer.weight.data).mean(axis=(1, 2, 3))
    beta = np.abs(x).mean()
    assert (alpha > 0).all() and beta > 0
    np.testing.assert_allclose(scaled, counts * alpha[None, :, None, None] * beta, rtol=1e-5)


def test_binary_linear_matches_sign_matmul(rng):
    x = rng.standard_normal((3, 100))
    layer = BinaryLinear(100, 7, rng=rng)
    with counters.counting() as c:
        got = binary_linear(Tensor(x), layer).data
    expect = np.where(x >= 0, 1, -1) @ np.where(layer.weight.data >= 0, 1, -1).T
    np.testing.assert_array_equal(got, expect)
    assert c["packed_linear"] == 1


def test_xnor_conv_direct_api(rng):
    x = rng.standard_normal((1, 66, 4, 4))
    w = rng.standard_normal((2, 66, 3, 3))
    out = xnor_conv(pack_activations(x, 1), pack_weights(w), 1, 4, 4)
    assert out.dtype == np.int64
    np.testing.assert_array_equal(out, naive_sign_conv(x, w, 1, 1))
