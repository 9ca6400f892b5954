from fractions import Fraction

import pytest
import torch

from landcover_cgan.errors import ShapeError
from landcover_cgan.nets import (LayerSpec, NetworkSpec, build_discriminator, build_from_spec,
                                 build_generator, count_parameters, discriminator_spec,
                                 forward_discriminator, forward_generator, generator_spec)
from oracles import DISCRIMINATOR_TABLE, GENERATOR_TABLE, table_weight_count


@pytest.fixture(scope="module")
def small_nets():
    torch.manual_seed(0)
    return build_generator(Fraction(1, 8)), build_discriminator(Fraction(1, 8))


def test_generator_shapes_match_table():
    g = build_generator(1)
    assert g.trace_shapes(torch.zeros(1, 4, 256, 256)) == GENERATOR_TABLE


def test_discriminator_shapes_match_table():
    d = build_discriminator(1)
    assert d.trace_shapes(torch.zeros(1, 4, 256, 256), torch.zeros(1, 6, 256, 256)) == DISCRIMINATOR_TABLE


def test_weight_counts_match_table_oracle():
    g_w, g_total = count_parameters(build_generator(1))
    d_w, d_total = count_parameters(build_discriminator(1))
    assert g_w == table_weight_count(GENERATOR_TABLE) == 41_828_352
    assert d_w == table_weight_count(DISCRIMINATOR_TABLE) == 2_770_944
    assert g_w + d_w == 44_599_296
    assert g_total > g_w and d_total > d_w


def test_spec_declares_skip_topology():
    spec = generator_spec(1)
    assert [layer.skip_source for layer in spec.layers[8:]] == [6, 5, 4, 3, 2, 1]
    assert spec.layers[7].skip_source is None
    assert [i + 1 for i, layer in enumerate(spec.layers) if layer.dropout] == [9, 10]
    assert spec.layers[6].activation == "relu" and spec.layers[6].norm == "none"
    assert spec.layers[-1].activation == "softmax"
    assert discriminator_spec(1).layers[-1].activation == "sigmoid"


def test_width_multiplier_scales_hidden_channels():
    spec = generator_spec(Fraction(1, 8))
    assert spec.layers[0].in_channels == 4 and spec.layers[0].out_channels == 8
    assert spec.layers[-1].out_channels == 6
    assert discriminator_spec("1/4").layers[0].in_channels == 10


@pytest.mark.parametrize("m", [Fraction(1, 16), Fraction(3, 256), 0.1])
def test_invalid_width_multiplier(m):
    with pytest.raises(ValueError):
        generator_spec(m)


def test_layer_spec_contract():
    with pytest.raises(ValueError):
        LayerSpec("down", 4, 8, kernel=3)
    with pytest.raises(ValueError):
        LayerSpec("down", 4, 8, dropout=0.3)


def test_spec_round_trip_and_equality():
    spec = generator_spec(Fraction(1, 8))
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    net = build_from_spec(spec)
    assert net.spec == build_generator(Fraction(1, 8)).spec


def test_generator_output_on_simplex(small_nets):
    g, _ = small_nets
    out = forward_generator(g, torch.rand(2, 4, 256, 256) * 2 - 1, train=True)
    assert out.shape == (2, 6, 256, 256)
    assert torch.allclose(out.sum(1), torch.ones(2, 256, 256), atol=1e-5)
    assert (out >= 0).all()


def test_generator_eval_is_deterministic(small_nets):
    g, _ = small_nets
    x = torch.rand(1, 4, 256, 256) * 2 - 1
    assert torch.equal(forward_generator(g, x), forward_generator(g, x))


def test_generator_train_mode_dropout_is_stochastic(small_nets):
    g, _ = small_nets
    x = torch.rand(2, 4, 256, 256) * 2 - 1
    torch.manual_seed(1)
    a = forward_generator(g, x, train=True)
    b = forward_generator(g, x, train=True)
    assert not torch.equal(a, b)


def test_generator_shape_errors(small_nets):
    g, _ = small_nets
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 3, 256, 256))
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 4, 100, 100))


def test_discriminator_patch_scores(small_nets):
    _, d = small_nets
    x = torch.zeros(2, 4, 256, 256)
    y = torch.zeros(2, 6, 256, 256)
    y[:, 0] = 1
    out = forward_discriminator(d, x, y)
    assert out.shape == (2, 1, 8, 8)
    assert ((out > 0) & (out < 1)).all()


def test_discriminator_rejects_five_channel_mask(small_nets):
    _, d = small_nets
    with pytest.raises(ShapeError):
        d(torch.zeros(1, 4, 256, 256), torch.zeros(1, 5, 256, 256))


def test_discriminator_per_sample_independent_in_eval(small_nets):
    _, d = small_nets
    x = torch.rand(3, 4, 256, 256)
    y = torch.softmax(torch.rand(3, 6, 256, 256), 1)
    out = forward_discriminator(d, x, y)
    perm = torch.tensor([2, 0, 1])
    out_p = forward_discriminator(d, x[perm], y[perm])
    assert torch.allclose(out[perm], out_p, atol=1e-6)


def test_initialisation_statistics():
    torch.manual_seed(0)
    g = build_generator(1)
    w = g.blocks[3][0].weight.detach()
    assert abs(float(w.mean())) < 1e-3 and abs(float(w.std()) - 0.02) < 1e-3
    bn = g.blocks[3][1].requires_grad_(False)
    assert abs(float(bn.weight.mean()) - 1) < 0.01 and float(bn.bias.abs().max()) == 0
    assert bn.momentum == 0.1
