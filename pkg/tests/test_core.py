from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlt.core import (
    LayerShift,
    ShiftBank,
    apply_nlt,
    backprop_through_nlt,
    count_shift_params,
    init_shift_bank,
    reg_grad,
    reg_loss,
)
from nlt.counter import LayerSpec, build_counter, forward

from oracles import central_diff, rel_err


def tiny_net(width=2, seed=0, kernel="conv3x3"):
    """Two conv layers around the three pool/upsample stages."""
    enc = [LayerSpec(kernel, 1, width)]
    for _ in range(3):
        enc.append(LayerSpec("maxpool2", width, width, "none"))
    dec = [LayerSpec("upsample2", width, width, "none") for _ in range(3)]
    dec.append(LayerSpec("conv1x1", width, 1, "none"))
    return build_counter((enc, dec), seed=seed)


def _single(weight, factor, bias):
    src = {"conv0.weight": np.asarray(weight, np.float64), "conv0.bias": np.zeros(len(weight))}
    bank = ShiftBank([LayerShift("conv0", np.asarray(factor, np.float64), np.asarray(bias, np.float64))])
    return src, bank


def test_init_bank_single_layer():
    enc = [LayerSpec("conv3x3", 3, 8)]
    net = build_counter(
        (enc + [LayerSpec("maxpool2", 8, 8, "none")] * 3,
         [LayerSpec("upsample2", 8, 8, "none")] * 3 + [LayerSpec("conv1x1", 8, 1, "none")])
    )
    bank = init_shift_bank(net)
    first = bank["conv0"]
    assert first.shape == (8, 3)
    assert all(len(n.factor) == 3 and len(n.bias) == 3 for _, _, n in bank.neurons() if _ == "conv0")
    assert (first.factor == 1).all() and (first.bias == 0).all()
    assert bank.k == 9


def test_vgg16_backbone_neuron_count():
    net = build_counter("paper_vgg16", in_channels=3)
    assert count_shift_params(net.encoder).neurons == 2688


def test_vgg16_bank_covers_all_layers():
    net = build_counter("paper_vgg16", in_channels=3)
    bank = init_shift_bank(net)
    assert bank.k == count_shift_params(net).neurons == 2688 + 256 + 128 + 64 + 32 + 1


def test_apply_nlt_identity_at_init():
    net = build_counter("desk_small", seed=1)
    target = apply_nlt(net.params, init_shift_bank(net))
    assert all(np.array_equal(target[k], v) for k, v in net.params.items())


def test_apply_nlt_direct_arithmetic():
    src, bank = _single([[[[1, 2], [3, 4]]]], [[2.0]], [[1.0]])
    np.testing.assert_array_equal(apply_nlt(src, bank)["conv0.weight"][0, 0], [[3, 5], [7, 9]])


def test_apply_nlt_per_channel_broadcast():
    w = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    src, bank = _single(w, [[1.0, 0.0]], [[0.0, 5.0]])
    out = apply_nlt(src, bank)["conv0.weight"]
    np.testing.assert_array_equal(out[0, 0], w[0, 0])
    np.testing.assert_array_equal(out[0, 1], np.full((2, 2), 5.0))


def test_apply_nlt_copies_conv_bias():
    net = build_counter("desk_small", seed=2)
    params = net.copy_params()
    params["conv3.bias"][:] = 0.25
    bank = init_shift_bank(net)
    bank["conv3"].bias[:] = 1.0
    out = apply_nlt(params, bank)
    np.testing.assert_array_equal(out["conv3.bias"], params["conv3.bias"])


def test_apply_nlt_structural_mismatch_names_layer():
    net = build_counter("desk_small")
    bank = init_shift_bank(net)
    bank.layers[2] = LayerShift("conv2", np.ones((3, 8), np.float32), np.zeros((3, 8), np.float32))
    with pytest.raises(ValueError, match="conv2.*neuron index"):
        apply_nlt(net.params, bank)
    short = ShiftBank(init_shift_bank(net).layers[:-1])
    with pytest.raises(ValueError, match="layers"):
        apply_nlt(net.params, short)


def test_backprop_direct_sums():
    src, bank = _single([[[[1, 2], [3, 4]]]], [[1.0]], [[0.0]])
    (df, db), = backprop_through_nlt({"conv0.weight": np.ones((1, 1, 2, 2))}, src, bank)
    assert df[0, 0] == 10 and db[0, 0] == 4
    (df, db), = backprop_through_nlt({"conv0.weight": np.zeros((1, 1, 2, 2))}, src, bank)
    assert not df.any() and not db.any()


def test_backprop_shape_mismatch():
    src, bank = _single(np.ones((1, 1, 2, 2)), [[1.0]], [[0.0]])
    with pytest.raises(ValueError, match="shape"):
        backprop_through_nlt({"conv0.weight": np.ones((1, 1, 3, 3))}, src, bank)


def test_source_immutable():
    net = build_counter("desk_small", seed=3)
    params = net.copy_params()
    before = {k: v.tobytes() for k, v in params.items()}
    rng = np.random.default_rng(0)
    bank = init_shift_bank(net)
    for layer in bank:
        layer.factor += rng.normal(0, 0.1, layer.factor.shape).astype(np.float32)
        layer.bias += rng.normal(0, 0.1, layer.bias.shape).astype(np.float32)
    apply_nlt(params, bank)
    backprop_through_nlt({k: rng.normal(size=v.shape) for k, v in params.items() if k.endswith("weight")},
                         params, bank)
    assert {k: v.tobytes() for k, v in params.items()} == before


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_apply_nlt_is_affine(seed, scale):
    rng = np.random.default_rng(seed)
    src, _ = _single(rng.normal(size=(3, 2, 3, 3)), np.ones((3, 2)), np.zeros((3, 2)))
    f = rng.normal(0, 0.2, (3, 2))
    b = rng.normal(0, 0.2, (3, 2))
    one = apply_nlt(src, ShiftBank([LayerShift("conv0", 1 + f, b)]))["conv0.weight"] - src["conv0.weight"]
    two = apply_nlt(src, ShiftBank([LayerShift("conv0", 1 + scale * f, scale * b)]))["conv0.weight"]
    np.testing.assert_allclose(two - src["conv0.weight"], scale * one, atol=1e-12)


def test_reg_loss_values():
    net = build_counter("desk_small")
    bank = init_shift_bank(net)
    assert reg_loss(bank, 1.0) == 0.0
    single = ShiftBank([LayerShift("conv0", np.array([[1.5]]), np.array([[-0.5]]))])
    assert reg_loss(single, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    assert reg_loss(single, 0.0) == 0.0
    (gf, gb), = reg_grad(single, 1e-4)
    assert gf[0, 0] == pytest.approx(1e-4) and gb[0, 0] == pytest.approx(-1e-4)
    with pytest.raises(ValueError, match=">= 0"):
        reg_loss(single, -1.0)
    with pytest.raises(ValueError, match=">= 0"):
        reg_grad(single, -1.0)


def test_count_single_layer():
    c = count_shift_params([LayerSpec("conv3x3", 3, 8)])
    assert (c.neurons, c.shift_scalars, c.source_weight_scalars) == (8, 48, 216)
    assert c.ratio == Fraction(2, 9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 64), min_size=2, max_size=12))
def test_all_3x3_ratio_exactly_two_ninths(channels):
    specs = [LayerSpec("conv3x3", a, b) for a, b in zip(channels, channels[1:])]
    assert count_shift_params(specs).ratio == Fraction(2, 9)
    for s in specs:
        assert count_shift_params([s]).ratio == Fraction(2, 9)


def test_vgg16_backbone_ratio():
    net = build_counter("paper_vgg16", in_channels=3)
    assert count_shift_params(net.encoder).ratio == Fraction(2, 9)


@pytest.mark.parametrize("seed", range(3))
def test_identity_forward(seed):
    net = build_counter("desk_small", seed=seed)
    x = np.random.default_rng(seed).random((2, 1, 16, 16)).astype(np.float32)
    a = forward(net, net.params, x).data
    b = forward(net, apply_nlt(net.params, init_shift_bank(net)), x).data
    assert np.abs(a - b).max() <= 1e-6


def test_shift_gradients_match_finite_differences():
    from nlt.data import Sample
    from nlt.training import shift_gradients

    net = tiny_net(seed=4)
    rng = np.random.default_rng(5)
    src = {k: v.astype(np.float64) for k, v in net.params.items()}
    src["conv1.weight"] = np.abs(src["conv1.weight"]) + 0.5
    src["conv0.bias"] += 0.1
    layers = []
    for name, shape in init_shift_bank(net).structure():
        layers.append(LayerShift(name, 1 + rng.normal(0, 0.1, shape), rng.normal(0, 0.05, shape)))
    bank = ShiftBank(layers)
    batch = [Sample(rng.random((1, 1, 8, 8)), np.zeros((0, 2)), rng.random((1, 1, 8, 8)) * 0.1, i)
             for i in range(2)]
    lam = 0.3
    terms, grads = shift_gradients(net, src, bank, batch, lam)
    assert terms.total == pytest.approx(terms.density + terms.reg, abs=1e-12)

    def loss():
        return shift_gradients(net, src, bank, batch, lam)[0].total

    numeric = central_diff(loss, bank.arrays(), h=1e-3)
    analytic = [g for pair in grads for g in pair]
    for a, n in zip(analytic, numeric):
        assert np.isfinite(a).all()
        assert rel_err(a, n) <= 1e-3
