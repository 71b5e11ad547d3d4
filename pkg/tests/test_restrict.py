from fractions import Fraction

import numpy as np
import pytest

from ir2net import counters
from ir2net.autograd import ConfigError, ShapeError, Tensor, get_tape
from ir2net.models import BackboneSpec, build
from ir2net.recover import RecoveryConfig
from ir2net.restrict import (IResConfig, apply_mask, attention_map, combined_loss, ires_step, make_mask,
                             upsampled_attention)

LAMBDAS = (0.0, 0.15, 0.5, 0.75, 1.0)


def _tiny_model(**kw):
    spec = BackboneSpec("resnet20", width_multiplier=Fraction(1, 4), **kw)
    return build(spec)


def test_attention_map_is_channel_sum_of_squares(rng):
    a = rng.standard_normal((2, 5, 3, 4))
    got = attention_map(Tensor(a, dtype=np.float64)).data
    expect = np.zeros((2, 3, 4))
    for c in range(5):
        expect += a[:, c] ** 2
    np.testing.assert_allclose(got, expect)


def test_mask_threshold_is_lambda_times_mean(rng):
    f_a = Tensor(np.abs(rng.standard_normal((3, 4, 4))), dtype=np.float64)
    masks = make_mask(f_a, 16, 16, 0.5)
    up = upsampled_attention(f_a, 16, 16)
    np.testing.assert_allclose(masks.tau, 0.5 * up.reshape(3, -1).mean(axis=1))
    np.testing.assert_array_equal(masks.values, (up >= masks.tau[:, None, None]).astype(np.uint8))
    assert set(np.unique(masks.values)) <= {0, 1}


def test_lambda_zero_keeps_everything(rng):
    f_a = Tensor(np.abs(rng.standard_normal((2, 2, 2))))
    masks = make_mask(f_a, 8, 8, 0.0)
    assert masks.values.all()
    images = Tensor(rng.standard_normal((2, 3, 8, 8)))
    out = apply_mask(images, masks).images
    assert out.data.tobytes() == images.data.tobytes()


def test_keep_fraction_non_increasing_in_lambda(rng):
    f_a = Tensor(np.abs(rng.standard_normal((4, 4, 4))) ** 2)
    keeps = [make_mask(f_a, 32, 32, lam).keep_fraction for lam in LAMBDAS]
    for lo, hi in zip(keeps, keeps[1:]):
        assert (hi <= lo).all()


def test_masking_zeroes_every_channel(rng):
    f_a = Tensor(np.abs(rng.standard_normal((1, 2, 2))))
    masks = make_mask(f_a, 4, 4, 1.0)
    images = rng.standard_normal((1, 3, 4, 4)) + 5
    out = apply_mask(Tensor(images), masks).images.data
    dropped = masks.values[0] == 0
    assert dropped.any()
    assert (out[0][:, dropped] == 0).all()
    np.testing.assert_allclose(out[0][:, ~dropped], images[0][:, ~dropped].astype(np.float32))


def test_mask_shape_mismatch_and_bad_lambda(rng):
    f_a = Tensor(np.ones((1, 2, 2)))
    with pytest.raises(ConfigError):
        make_mask(f_a, 4, 4, 1.5)
    with pytest.raises(ShapeError):
        apply_mask(Tensor(np.zeros((1, 3, 5, 5))), make_mask(f_a, 4, 4, 0.1))
    with pytest.raises(ConfigError):
        IResConfig(lam=-0.1)


def test_combined_loss_weights():
    total = combined_loss(Tensor(np.array(2.0)), Tensor(np.array(4.0)), 0.25)
    assert total.item() == pytest.approx(0.25 * 2 + 0.75 * 4)


def test_ires_step_two_passes_and_bn_updated_once(rng):
    model = _tiny_model(recovery=RecoveryConfig("cirec", 4))
    plain = _tiny_model(recovery=RecoveryConfig("cirec", 4))
    x = Tensor(rng.standard_normal((4, 3, 32, 32)))
    y = np.array([0, 1, 2, 3])
    with counters.counting() as c:
        total, stats = ires_step(model, x, y, IResConfig(0.15, 0.5))
    get_tape().reset()
    assert stats.forwards == 2
    assert c["ires_attention"] == c["ires_mask"] == c["ires_apply"] == 1
    assert total.item() == pytest.approx(0.5 * stats.loss_original + 0.5 * stats.loss_masked, rel=1e-5)
    plain(x)
    for (n1, b1), (_, b2) in zip(model.named_buffers(), plain.named_buffers()):
        np.testing.assert_array_equal(b1, b2, err_msg=n1)


def test_ires_disabled_is_single_pass(rng):
    model = _tiny_model()
    with counters.counting() as c:
        _, stats = ires_step(model, Tensor(rng.standard_normal((2, 3, 32, 32))), [0, 1], IResConfig(enabled=False))
    get_tape().reset()
    assert stats.forwards == 1 and stats.keep_fraction is None
    assert c["ires_mask"] == 0
