"""Layer graph: forward semantics, analytic vs finite-difference gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_param_grad, rel_err
from zsnas import nn


def single(kind, **kw):
    layers = [nn.Layer("input"), nn.Layer(kind, (0,), **kw)]
    return layers


class TestForward:
    def test_identity_conv(self):
        net = nn.Network(single("conv2d", c_in=1, c_out=1, k=1), (1, 1, 1))
        net.params[0] = 1.0
        y, _ = nn.forward(net, np.array([[[[2.0]]]]))
        assert y.tolist() == [[[[2.0]]]]

    def test_relu_definition(self):
        net = nn.Network(single("relu"), (1, 1, 3))
        y, _ = nn.forward(net, np.array([[[[-1.0, 0.0, 3.0]]]]))
        assert y.ravel().tolist() == [0.0, 0.0, 3.0]

    def test_avgpool_constant_map(self):
        net = nn.Network(single("avgpool", k=3, stride=1, pad=1), (1, 5, 5))
        y, _ = nn.forward(net, np.full((2, 1, 5, 5), 7.0))
        assert np.all(y == 7.0)

    def test_gap_mean(self):
        net = nn.Network(single("global_avg_pool"), (2, 4, 4))
        x = np.arange(2 * 2 * 16, dtype=float).reshape(2, 2, 4, 4)
        y, _ = nn.forward(net, x)
        assert np.allclose(y, x.mean(axis=(2, 3)))

    def test_input_shape_mismatch_names_layer(self):
        net = nn.Network(single("relu"), (1, 2, 2))
        with pytest.raises(nn.ShapeError, match="input"):
            nn.forward(net, np.zeros((1, 1, 3, 3)))

    def test_forward_determinism(self):
        layers = [
            nn.Layer("input"),
            nn.Layer("conv2d", (0,), c_in=2, c_out=3, k=3, pad=1),
            nn.Layer("relu", (1,)),
            nn.Layer("global_avg_pool", (2,)),
            nn.Layer("linear", (3,), c_in=3, c_out=4),
        ]
        net = nn.Network(layers, (2, 6, 6))
        nn.init_params(net, 11)
        x = np.random.default_rng(0).standard_normal((3, 2, 6, 6))
        y1, _ = nn.forward(net, x)
        y2, _ = nn.forward(net, x)
        assert np.array_equal(y1, y2)

    def test_wiring_validation(self):
        with pytest.raises(nn.ShapeError):
            nn.Network([nn.Layer("input"), nn.Layer("conv2d", (0,), c_in=5, c_out=1, k=1)], (2, 3, 3))
        with pytest.raises(nn.ShapeError):
            nn.Network([nn.Layer("input"), nn.Layer("linear", (0,), c_in=4, c_out=2)], (1, 2, 2))


class TestInit:
    def test_deterministic_given_seed(self):
        layers = single("linear", c_in=4, c_out=1)
        layers[0] = nn.Layer("input")
        # linear needs a 1-D source; go through gap
        layers = [
            nn.Layer("input"),
            nn.Layer("global_avg_pool", (0,)),
            nn.Layer("linear", (1,), c_in=4, c_out=1),
        ]
        net1 = nn.Network(layers, (4, 2, 2))
        nn.init_params(net1, 7)
        first = net1.params.copy()
        nn.init_params(net1, 7)
        assert np.array_equal(first, net1.params)

    def test_kaiming_std(self):
        # conv 3x3, c_in=16: fan_in 144; >= 1e4 draws
        layers = [nn.Layer("input"), nn.Layer("conv2d", (0,), c_in=16, c_out=128, k=3, pad=1)]
        net = nn.Network(layers, (16, 4, 4))
        nn.init_params(net, 3)
        weights = net.params[: 128 * 16 * 9]
        assert weights.size >= 10_000
        expected = np.sqrt(2.0 / 144.0)
        assert abs(weights.std() - expected) < 0.1 * expected

    def test_biases_exactly_zero(self):
        layers = [
            nn.Layer("input"),
            nn.Layer("conv2d", (0,), c_in=2, c_out=3, k=3, pad=1),
            nn.Layer("global_avg_pool", (1,)),
            nn.Layer("linear", (2,), c_in=3, c_out=5),
        ]
        net = nn.Network(layers, (2, 4, 4))
        nn.init_params(net, 5)
        for layer in net.layers:
            if layer.b_len:
                assert np.all(net.params[layer.b_off : layer.b_off + layer.b_len] == 0.0)


class TestGradients:
    def test_product_rule_scalar(self):
        # f(x) = w * x, w = 3, x = 5 -> df/dw = 5
        net = nn.Network(single("conv2d", c_in=1, c_out=1, k=1, bias=False), (1, 1, 1))
        net.params[0] = 3.0
        y, tape = nn.forward(net, np.array([[[[5.0]]]]))
        g = nn.grad_params(net, tape, np.ones_like(y))
        assert g.tolist() == [5.0]

    def test_zero_seed_zero_grad(self):
        layers = [
            nn.Layer("input"),
            nn.Layer("conv2d", (0,), c_in=2, c_out=2, k=3, pad=1),
            nn.Layer("relu", (1,)),
        ]
        net = nn.Network(layers, (2, 4, 4))
        nn.init_params(net, 0)
        x = np.random.default_rng(1).standard_normal((2, 2, 4, 4))
        y, tape = nn.forward(net, x)
        g = nn.grad_params(net, tape, np.zeros_like(y))
        assert np.all(g == 0.0)

    def test_conv_relu_net_matches_finite_differences(self):
        layers = [
            nn.Layer("input"),
            nn.Layer("conv2d", (0,), c_in=2, c_out=3, k=3, stride=1, pad=1),
            nn.Layer("relu", (1,)),
            nn.Layer("conv2d", (2,), c_in=3, c_out=2, k=1),
        ]
        net = nn.Network(layers, (2, 5, 5))
        nn.init_params(net, 9)
        x = np.random.default_rng(2).standard_normal((2, 2, 5, 5))
        y, tape = nn.forward(net, x)
        seed = np.random.default_rng(3).standard_normal(y.shape)
        analytic = nn.grad_params(net, tape, seed)
        numeric = fd_param_grad(net, x, seed)
        assert rel_err(analytic, numeric) < 1e-4

    @pytest.mark.parametrize(
        "layers,shape",
        [
            ([nn.Layer("conv2d", (0,), c_in=2, c_out=2, k=3, stride=2, pad=1)], (2, 5, 5)),
            ([nn.Layer("avgpool", (0,), k=3, stride=1, pad=1),
              nn.Layer("conv2d", (1,), c_in=2, c_out=1, k=1)], (2, 4, 4)),
            ([nn.Layer("global_avg_pool", (0,)),
              nn.Layer("linear", (1,), c_in=2, c_out=3)], (2, 4, 4)),
            ([nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=3, pad=1),
              nn.Layer("relu", (1,)),
              nn.Layer("scale", (2,), alpha=0.5)], (1, 3, 3)),
        ],
        ids=["strided-conv", "pool-conv", "gap-linear", "conv-relu-scale"],
    )
    def test_each_kind_matches_finite_differences(self, layers, shape):
        net = nn.Network([nn.Layer("input")] + layers, shape)
        nn.init_params(net, 17)
        x = np.random.default_rng(4).standard_normal((2,) + shape)
        y, tape = nn.forward(net, x)
        seed = np.random.default_rng(5).standard_normal(y.shape)
        assert rel_err(nn.grad_params(net, tape, seed), fd_param_grad(net, x, seed)) < 1e-4

    def test_input_grad_matches_finite_differences(self):
        layers = [
            nn.Layer("input"),
            nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=3, pad=1),
            nn.Layer("relu", (1,)),
            nn.Layer("avgpool", (2,), k=3, stride=1, pad=1),
        ]
        net = nn.Network(layers, (1, 4, 4))
        nn.init_params(net, 23)
        x = np.random.default_rng(6).standard_normal((1, 1, 4, 4))
        y, tape = nn.forward(net, x)
        seed = np.ones_like(y)
        _, gx = nn.grad_params(net, tape, seed, return_input_grad=True)
        h = 1e-5
        numeric = np.empty_like(x)
        flat = x.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            yp, _ = nn.forward(net, x)
            flat[i] = orig - h
            ym, _ = nn.forward(net, x)
            flat[i] = orig
            numeric.ravel()[i] = (seed * (yp - ym)).sum() / (2 * h)
        assert rel_err(gx, numeric) < 1e-4

    def test_stale_tape_rejected(self):
        net = nn.Network(single("conv2d", c_in=1, c_out=1, k=1), (1, 2, 2))
        nn.init_params(net, 1)
        x = np.ones((1, 1, 2, 2))
        y, tape = nn.forward(net, x)
        nn.init_params(net, 2)
        with pytest.raises(nn.StaleTapeError):
            nn.grad_params(net, tape, np.ones_like(y))


class TestActivationPattern:
    def test_sign_bits(self):
        net = nn.Network(single("relu"), (1, 1, 3))
        _, tape = nn.forward(net, np.array([[[[-1.0, 0.0, 3.0]]]]))
        bits = nn.activation_pattern(net, tape)
        assert bits.astype(int).tolist() == [[0, 0, 1]]

    def test_identical_inputs_identical_bits(self):
        layers = [
            nn.Layer("input"),
            nn.Layer("conv2d", (0,), c_in=1, c_out=2, k=3, pad=1),
            nn.Layer("relu", (1,)),
        ]
        net = nn.Network(layers, (1, 4, 4))
        nn.init_params(net, 8)
        x = np.random.default_rng(7).standard_normal((1, 1, 4, 4))
        _, tape = nn.forward(net, np.concatenate([x, x], axis=0))
        bits = nn.activation_pattern(net, tape)
        assert np.array_equal(bits[0], bits[1])

    def test_no_relu_is_an_error(self):
        net = nn.Network(single("scale", alpha=2.0), (1, 2, 2))
        _, tape = nn.forward(net, np.zeros((1, 1, 2, 2)))
        with pytest.raises(nn.NoReluError):
            nn.activation_pattern(net, tape)

    def test_matches_sign_enumeration_on_grid(self):
        # 2-relu toy net over a 2-D input grid vs explicit sign enumeration
        layers = [
            nn.Layer("input"),
            nn.Layer("global_avg_pool", (0,)),
            nn.Layer("linear", (1,), c_in=2, c_out=2, bias=False),
            nn.Layer("relu", (2,)),
        ]
        net = nn.Network(layers, (2, 1, 1))
        w = np.array([[1.0, -1.0], [0.5, 2.0]])
        net.params[:] = w.ravel()
        grid = np.linspace(-2, 2, 9)
        pts = np.array([[a, b] for a in grid for b in grid])
        x = pts.reshape(-1, 2, 1, 1)
        _, tape = nn.forward(net, x)
        got = {tuple(row) for row in nn.activation_pattern(net, tape).astype(int).tolist()}
        expected = {tuple(int(v > 0) for v in w @ p) for p in pts}
        assert got == expected


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(1, 40),
    k=st.integers(1, 5),
    stride=st.integers(1, 3),
    pad=st.integers(0, 3),
)
def test_conv_output_shape_algebra(h, k, stride, pad):
    """H_out = floor((H + 2 pad - K) / stride) + 1 whenever the window fits."""
    if h + 2 * pad < k:
        return
    layers = [nn.Layer("input"), nn.Layer("conv2d", (0,), c_in=1, c_out=1, k=k, stride=stride, pad=pad)]
    net = nn.Network(layers, (1, h, h))
    y, _ = nn.forward(net, np.zeros((1, 1, h, h)))
    expected = (h + 2 * pad - k) // stride + 1
    assert y.shape[2] == expected == nn.conv_out_dim(h, k, stride, pad)
