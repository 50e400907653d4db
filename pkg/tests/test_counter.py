import numpy as np
import pytest

from nlt.counter import (
    PAPER_VGG16_ENCODER_CHANNELS,
    CounterNet,
    LayerSpec,
    build_counter,
    count_from_density,
    forward,
)
from nlt.data import density_from_points


def _conv_channels(specs):
    return [s.out_channels for s in specs if s.is_conv]


def test_paper_vgg16_channel_plan():
    net = build_counter("paper_vgg16", seed=0, in_channels=3)
    assert _conv_channels(net.encoder) == list(PAPER_VGG16_ENCODER_CHANNELS)
    assert len(_conv_channels(net.encoder)) == 10
    kinds = [s.kind for s in net.encoder]
    conv_seen, pools_after = 0, []
    for k in kinds:
        if k == "conv3x3":
            conv_seen += 1
        elif k == "maxpool2":
            pools_after.append(conv_seen)
    assert pools_after == [2, 4, 7]
    assert _conv_channels(net.decoder) == [256, 128, 64, 32, 1]
    assert [s.kind for s in net.decoder].count("upsample2") == 3
    assert net.decoder[-1].kind == "conv1x1"
    assert len(net.conv_specs) == 15


def test_desk_small_plan():
    net = build_counter("desk_small")
    assert _conv_channels(net.encoder) == [8, 8, 16, 16, 32, 32]
    assert [s.kind for s in net.encoder].count("maxpool2") == 3
    assert _conv_channels(net.decoder) == [16, 8, 4, 1]
    assert net.in_channels == 1


def test_build_is_deterministic_in_seed():
    a, b = build_counter("desk_small", seed=7), build_counter("desk_small", seed=7)
    assert a.params.keys() == b.params.keys()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = build_counter("desk_small", seed=8)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_biases_zero_and_weights_fan_in_scaled():
    net = build_counter("paper_vgg16", seed=1, in_channels=3)
    for k, v in net.params.items():
        if k.endswith(".bias"):
            assert not v.any()
    w = net.params["conv9.weight"]  # 512 x 512 x 3 x 3
    assert abs(w.std() - np.sqrt(2.0 / (512 * 9))) < 0.02 * np.sqrt(2.0 / (512 * 9))
    assert abs(w.mean()) < 1e-3


def test_explicit_spec_channel_mismatch_rejected():
    enc = [LayerSpec("conv3x3", 1, 8), LayerSpec("maxpool2", 8, 8, "none"), LayerSpec("conv3x3", 16, 32)]
    dec = [LayerSpec("conv1x1", 32, 1, "none")]
    with pytest.raises(ValueError, match="in_channels=16 does not match previous layer's out_channels=8"):
        build_counter((enc, dec))


def test_explicit_spec_needs_three_pools():
    enc = [LayerSpec("conv3x3", 1, 4), LayerSpec("maxpool2", 4, 4, "none")]
    dec = [LayerSpec("upsample2", 4, 4, "none"), LayerSpec("conv1x1", 4, 1, "none")]
    with pytest.raises(ValueError, match="exactly 8"):
        build_counter((enc, dec))


def test_explicit_valid_spec_builds():
    enc = []
    for _ in range(3):
        enc += [LayerSpec("conv3x3", enc[-1].out_channels if enc else 1, 4), LayerSpec("maxpool2", 4, 4, "none")]
    dec = []
    for _ in range(3):
        dec += [LayerSpec("upsample2", 4, 4, "none"), LayerSpec("conv3x3", 4, 4)]
    dec.append(LayerSpec("conv1x1", 4, 1, "none"))
    net = build_counter((enc, dec), seed=0)
    assert forward(net, net.params, np.zeros((1, 1, 16, 16), np.float32)).shape == (1, 1, 16, 16)


def test_forward_shape_contract():
    net = build_counter("desk_small", seed=0)
    x = np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32)
    assert forward(net, net.params, x).shape == (2, 1, 32, 32)


@pytest.mark.parametrize("hw", [(8, 8), (16, 24), (40, 16)])
def test_spatial_round_trip(hw):
    net = build_counter("desk_small", seed=3)
    x = np.ones((1, 1, *hw), np.float32)
    assert forward(net, net.params, x).shape[2:] == hw


def test_forward_zero_params_zero_output():
    net = build_counter("desk_small", seed=0)
    zeros = {k: np.zeros_like(v) for k, v in net.params.items()}
    out = forward(net, zeros, np.random.default_rng(1).random((2, 1, 16, 16)))
    assert not out.data.any()


def test_forward_nonnegative_for_random_params():
    rng = np.random.default_rng(2)
    net = build_counter("desk_small", seed=0)
    for _ in range(5):
        params = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in net.params.items()}
        out = forward(net, params, rng.normal(size=(2, 1, 16, 16)))
        assert out.data.min() >= 0.0


def test_forward_rejects_indivisible_size():
    net = build_counter("desk_small")
    with pytest.raises(ValueError, match="pad"):
        forward(net, net.params, np.zeros((1, 1, 30, 32), np.float32))


def test_param_shapes_pure_function_of_specs():
    a = build_counter("desk_small", seed=0)
    b = CounterNet.from_architecture(a.architecture())
    assert a.param_shapes() == b.param_shapes()
    assert {k: v.shape for k, v in a.params.items()} == a.param_shapes()


def test_count_from_density():
    assert count_from_density(np.zeros((1, 1, 8, 8))) == 0.0
    assert count_from_density(np.ones((1, 1, 4, 4))) == 16.0
    rng = np.random.default_rng(4)
    pts = rng.uniform(14, 50, size=(12, 2))
    assert abs(count_from_density(density_from_points(pts, 4.0, (64, 64))) - 12) <= 0.05
