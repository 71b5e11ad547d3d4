from fractions import Fraction

import numpy as np
import pytest

from ir2net import counters
from ir2net.autograd import ConfigError, ShapeError, Tensor, no_grad
from ir2net.models import BackboneSpec, build, binary_layers, real_weight_layers
from ir2net.nn import Conv2d
from ir2net.recover import RecoveryConfig


def test_resnet20_layer_inventory():
    model = build(BackboneSpec("resnet20"))
    assert len(binary_layers(model)) == 18
    real = real_weight_layers(model)
    assert sorted(real) == ["fc", "stages.1.0.sc_conv", "stages.2.0.sc_conv", "stem_conv"]


def test_resnet18_layer_inventory_and_taps():
    model = build(BackboneSpec("resnet18", input_size=(224, 224), num_classes=1000))
    assert len(binary_layers(model)) == 16
    ts = model.tapset
    assert [t.channels for t in ts.taps] == [64, 64, 128, 256]
    assert ts.last == (512, 7, 7)
    assert ts.fused_in_channels == 1024
    assert model.spec.act_kind == "prelu" and model.spec.stem_kind == "imagenet"


@pytest.mark.parametrize("name", ["resnet20", "resnet18", "vgg_small"])
def test_tap_sizes_non_increasing(name):
    ts = build(BackboneSpec(name)).tapset
    sizes = [t.size[0] * t.size[1] for t in ts.taps] + [ts.last[1] * ts.last[2]]
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[0] > sizes[-1]


@pytest.mark.parametrize("name,rec", [("resnet20", RecoveryConfig()), ("resnet20", RecoveryConfig("cirec", 2)),
                                      ("vgg_small", RecoveryConfig("irec")), ("resnet18", RecoveryConfig())])
def test_forward_shapes(rng, name, rec):
    spec = BackboneSpec(name, width_multiplier=Fraction(1, 4), recovery=rec)
    model = build(spec)
    with no_grad():
        out = model(Tensor(rng.standard_normal((2, 3, 32, 32))))
    assert out.logits.shape == (2, 10)
    assert out.penultimate.shape == (2,) + model.tapset.last
    assert len(out.taps) == len(model.tapset.taps)


def test_first_and_last_layers_stay_real(rng):
    model = build(BackboneSpec("resnet20", width_multiplier=Fraction(1, 2)))
    assert isinstance(model.stem_conv, Conv2d)
    with no_grad(), counters.counting() as c:
        model(Tensor(rng.standard_normal((1, 3, 32, 32))))
    assert c["packed_conv"] == 18
    assert c["conv2d"] == 3        # stem + two shortcuts


def test_binarize_off_gives_real_twin():
    model = build(BackboneSpec("resnet20", binarize=False))
    assert binary_layers(model) == []


def test_bad_specs():
    with pytest.raises(ConfigError):
        build(BackboneSpec("resnet20", width_multiplier=Fraction(1, 3)))
    with pytest.raises(ConfigError):
        BackboneSpec("alexnet")
    with pytest.raises(ShapeError):
        build(BackboneSpec("resnet20"))(Tensor(np.zeros((1, 3, 16, 16))))


def test_same_seed_same_weights():
    a = build(BackboneSpec("resnet20", seed=3)).state_dict()
    b = build(BackboneSpec("resnet20", seed=3)).state_dict()
    c = build(BackboneSpec("resnet20", seed=4)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)
