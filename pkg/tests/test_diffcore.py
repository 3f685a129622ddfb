"""Autodiff core: gradients, tape semantics, layers, checkpoint container."""

import numpy as np
import pytest

import occflow
from occflow import ConvLayer, Tensor, concat, conv2d, leaky_relu, resize_bilinear
from occflow.diffcore import abs_, mean, pow_const, sum_
from occflow.errors import DimensionError, FormatError

from gradcheck import gradcheck


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))

    def test_sum_of_squares_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).sum().backward()
        assert x.grad == 6.0

    def test_non_scalar_backward_raises(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2).backward()

    def test_repeated_backward_accumulates(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        loss = x.sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(4))
        x.zero_grad()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_no_grad_blocks_recording(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with occflow.no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad

    def test_diamond_graph_accumulates_once_per_path(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        z = y + y
        z.backward()
        assert x.grad == 8.0

    def test_detach_stops_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        (x.detach() * x).backward()
        assert x.grad == 3.0


class TestOpGradients:
    def test_arithmetic_chain(self, rng):
        arrays = {"a": rng.normal(size=(2, 3)) + 3.0, "b": rng.normal(size=(2, 3)) + 3.0}
        gradcheck(lambda t: ((t["a"] * t["b"] + t["a"]) / t["b"]).sum(), arrays)

    def test_broadcasting(self, rng):
        arrays = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(1, 3, 1))}
        gradcheck(lambda t: (t["a"] * t["b"] + t["b"]).sum(), arrays)

    def test_pow_abs_mean(self, rng):
        arrays = {"x": rng.normal(size=(3, 3)) + 2.5}
        gradcheck(lambda t: mean(pow_const(abs_(t["x"]) + 0.01, 0.4)), arrays)

    def test_sum_axes_keepdims(self, rng):
        arrays = {"x": rng.normal(size=(2, 3, 4))}
        gradcheck(lambda t: (sum_(t["x"], axis=(0, 2), keepdims=True)
                             * sum_(t["x"], axis=1, keepdims=True)).sum(), arrays)

    def test_concat_getitem_slice(self, rng):
        arrays = {"a": rng.normal(size=(1, 2, 3, 3)), "b": rng.normal(size=(1, 1, 3, 3))}

        def loss(t):
            c = concat([t["a"], t["b"]], axis=1)
            return (c[:, 1:, 1:, :-1] * c[:, :2, :-1, 1:]).sum()

        gradcheck(loss, arrays)

    def test_leaky_relu_values_and_grad(self):
        x = Tensor(np.array([2.0, -2.0]), requires_grad=True)
        y = leaky_relu(x, 0.1)
        np.testing.assert_allclose(y.data, [2.0, -0.2])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [1.0, 0.1])
        gradcheck(lambda t: leaky_relu(t["x"], 0.1).sum(),
                  {"x": np.array([-1.0])})

    def test_conv2d_gradient_vs_finite_differences(self, rng):
        # the spec's canonical 1x2x5x5 gradient check
        x = rng.normal(size=(1, 2, 5, 5))
        layer = ConvLayer(2, 3, 3, stride=1, padding=1, rng=rng)

        def loss(t):
            lay = ConvLayer(2, 3, 3, stride=1, padding=1)
            lay.kernel = t["kernel"]
            lay.bias = t["bias"]
            return (conv2d(t["x"], lay) ** 2.0).sum()

        err = gradcheck(loss, {"x": x,
                               "kernel": layer.kernel.data.copy(),
                               "bias": layer.bias.data.copy()})
        assert err <= 1e-4

    def test_conv2d_strided_dilated_gradient(self, rng):
        x = rng.normal(size=(1, 2, 7, 7))
        layer = ConvLayer(2, 2, 3, stride=2, padding=2, dilation=2, rng=rng)

        def loss(t):
            lay = ConvLayer(2, 2, 3, stride=2, padding=2, dilation=2)
            lay.kernel = t["kernel"]
            lay.bias = t["bias"]
            return (conv2d(t["x"], lay) ** 2.0).sum()

        gradcheck(loss, {"x": x, "kernel": layer.kernel.data.copy(),
                         "bias": layer.bias.data.copy()})

    def test_resize_gradient(self, rng):
        arrays = {"x": rng.normal(size=(1, 2, 4, 5))}
        gradcheck(lambda t: (resize_bilinear(t["x"], 7, 3) ** 2.0).sum(), arrays)
        gradcheck(lambda t: (resize_bilinear(t["x"], 2, 9) ** 2.0).sum(), arrays)


class TestConvLayer:
    def test_output_size_invariant(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 11, 13)))
        for stride, padding, dilation in [(1, 0, 1), (2, 1, 1), (1, 3, 3), (2, 2, 2)]:
            layer = ConvLayer(3, 2, 3, stride=stride, padding=padding,
                              dilation=dilation, rng=rng)
            out = conv2d(x, layer)
            exp_h = (11 + 2 * padding - dilation * 2 - 1) // stride + 1
            exp_w = (13 + 2 * padding - dilation * 2 - 1) // stride + 1
            assert out.shape == (1, 2, exp_h, exp_w)

    def test_channel_mismatch_raises(self, rng):
        layer = ConvLayer(4, 2, 3, rng=rng)
        with pytest.raises(DimensionError):
            conv2d(Tensor(rng.normal(size=(1, 3, 5, 5))), layer)

    def test_conv_linearity(self, rng):
        layer = ConvLayer(2, 2, 3, rng=rng)
        layer.bias = Tensor(np.zeros(2), requires_grad=True)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        y = Tensor(rng.normal(size=(1, 2, 6, 6)))
        lhs = conv2d(Tensor(2.0 * x.data + 3.0 * y.data), layer).data
        rhs = 2.0 * conv2d(x, layer).data + 3.0 * conv2d(y, layer).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_same_seed_same_weights(self):
        a = ConvLayer(3, 4, 3, rng=np.random.default_rng(42))
        b = ConvLayer(3, 4, 3, rng=np.random.default_rng(42))
        np.testing.assert_array_equal(a.kernel.data, b.kernel.data)


class TestDtypeSwitch:
    def test_default_dtype_applies_to_new_tensors(self):
        occflow.set_default_dtype(np.float32)
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32
        occflow.set_default_dtype(np.float64)
        assert Tensor([1.0]).dtype == np.float64

    def test_float32_forward_backward_runs(self, rng):
        occflow.set_default_dtype(np.float32)
        layer = ConvLayer(2, 2, 3, rng=rng)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        (conv2d(x, layer) ** 2.0).sum().backward()
        assert x.grad.dtype == np.float32
        assert layer.kernel.grad.dtype == np.float32


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        state = {
            "enc.conv1.kernel": rng.normal(size=(4, 3, 3, 3)),
            "enc.conv1.bias": rng.normal(size=4),
            "scalar": np.array(3.25),
        }
        path = tmp_path / "model.oifw"
        occflow.save_checkpoint(path, state)
        loaded = occflow.load_checkpoint(path)
        assert list(loaded) == list(state)
        for k in state:
            assert loaded[k].dtype == np.float64
            np.testing.assert_array_equal(loaded[k], state[k])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "one.oifw"
        occflow.save_checkpoint(path, {"w": np.zeros((2, 3))})
        raw = path.read_bytes()
        assert raw[:4] == b"OIFW"
        # version, count, name_len, "w", rank, extents, 6 doubles
        assert len(raw) == 4 + 4 + 4 + 2 + 1 + 1 + 8 + 48

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.oifw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            occflow.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path, rng):
        path = tmp_path / "trunc.oifw"
        occflow.save_checkpoint(path, {"w": rng.normal(size=(4, 4))})
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError):
            occflow.load_checkpoint(path)

    def test_float32_params_round_trip_exactly(self, tmp_path, rng):
        occflow.set_default_dtype(np.float32)
        w = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
        path = tmp_path / "f32.oifw"
        occflow.save_checkpoint(path, {"w": w})
        back = occflow.load_checkpoint(path)["w"].astype(np.float32)
        np.testing.assert_array_equal(back, w.data)
