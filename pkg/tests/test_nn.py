import math

import numpy as np
import pytest

from voxeltrack.exceptions import ConfigError, NonFiniteError, ShapeError
from voxeltrack.nn.correlation import cross_correlate, cross_correlate_backward
from voxeltrack.nn.layers import (ConvLayer, FgnParams, conv2d, conv2d_backward, fgn_backward, fgn_forward,
                                  fgn_forward_cached)
from voxeltrack.nn.loss import LossSpec, weighted_bce
from voxeltrack.nn.optim import Adam, AdamState, adam_step
from voxeltrack.nn.resize import bicubic_resize, bicubic_resize_backward, resize_matrix


def naive_conv(x, weight, bias, stride):
    out_channels, _, kh, kw = weight.shape
    out_h = (x.shape[1] - kh) // stride + 1
    out_w = (x.shape[2] - kw) // stride + 1
    result = np.zeros((out_channels, out_h, out_w))
    for o in range(out_channels):
        for r in range(out_h):
            for c in range(out_w):
                total = bias[o]
                for ch in range(x.shape[0]):
                    for i in range(kh):
                        for j in range(kw):
                            total += x[ch, r * stride + i, c * stride + j] * weight[o, ch, i, j]
                result[o, r, c] = total
    return result


def naive_correlation(search, target):
    _, th, tw = target.shape
    out = np.zeros((search.shape[1] - th + 1, search.shape[2] - tw + 1))
    for u in range(out.shape[0]):
        for v in range(out.shape[1]):
            out[u, v] = np.sum(search[:, u:u + th, v:v + tw] * target)
    return out


def numeric_gradient(func, array, h=1e-5):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        plus = func()
        array[index] = original - h
        minus = func()
        array[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


class TestConv2d:

    def test_sum_kernel(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        result = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
        assert result.shape == (1, 1, 1)
        assert result[0, 0, 0] == 36

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 6, 5))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(x, kernel, np.zeros(1)), x[:, 1:-1, 1:-1])

    @pytest.mark.parametrize('stride', [1, 2, 3])
    def test_naive_oracle(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((2, 8, 8))
        weight = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        np.testing.assert_allclose(conv2d(x, weight, bias, stride), naive_conv(x, weight, bias, stride),
                                   atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 2, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    @pytest.mark.parametrize('stride', [1, 2])
    def test_backward(self, stride):
        rng = np.random.default_rng(10 + stride)
        x = rng.standard_normal((2, 7, 6))
        weight = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        upstream = rng.standard_normal(conv2d(x, weight, bias, stride).shape)
        grad_x, grad_w, grad_b = conv2d_backward(upstream, x, weight, stride)

        def loss():
            return float(np.sum(upstream * conv2d(x, weight, bias, stride)))

        np.testing.assert_allclose(grad_x, numeric_gradient(loss, x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(grad_w, numeric_gradient(loss, weight), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(grad_b, numeric_gradient(loss, bias), rtol=1e-6, atol=1e-8)


class TestFgn:

    def test_zero_image(self):
        params = FgnParams.initialize(4, channels=8, rng=np.random.default_rng(0))
        assert not fgn_forward(np.zeros((4, 12, 12)), params).any()

    def test_output_dims(self):
        params = FgnParams.initialize(2, blocks=2, layers_per_block=2, channels=4, rng=np.random.default_rng(0))
        # 20 -> 18 -> 16 -> (16 - 3) // 2 + 1 = 7 -> 5
        assert params.output_size(20, 24) == (5, 7)
        assert fgn_forward(np.ones((2, 20, 24)), params).shape == (4, 5, 7)

    def test_too_small(self):
        params = FgnParams.initialize(2, channels=4, rng=np.random.default_rng(0))
        with pytest.raises(ShapeError, match='8x9'):
            fgn_forward(np.ones((2, 8, 9)), params)

    def test_channel_mismatch(self):
        params = FgnParams.initialize(2, channels=4, rng=np.random.default_rng(0))
        with pytest.raises(ShapeError):
            fgn_forward(np.ones((3, 12, 12)), params)

    def test_positive_homogeneity(self):
        params = FgnParams.initialize(2, channels=4, rng=np.random.default_rng(1))
        x = np.random.default_rng(2).uniform(0, 1, (2, 12, 12))
        np.testing.assert_allclose(fgn_forward(2 * x, params), 2 * fgn_forward(x, params), atol=1e-12)

    def test_invalid_layers(self):
        params = FgnParams.initialize(2, channels=4, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            FgnParams(1, 4, 4, 1, params.layers[:3])
        with pytest.raises(ConfigError):
            FgnParams(1, 4, 4, 1, [ConvLayer(layer.weight, layer.bias, 2) for layer in params.layers])

    def test_backward_round_trips_shapes(self):
        rng = np.random.default_rng(3)
        params = FgnParams.initialize(3, blocks=2, layers_per_block=2, channels=4, rng=rng)
        output, cache = fgn_forward_cached(rng.standard_normal((3, 15, 15)), params)
        grad_input, layer_grads = fgn_backward(np.ones_like(output), cache, params)
        assert grad_input.shape == (3, 15, 15)
        for layer, (grad_weight, grad_bias) in zip(params.layers, layer_grads):
            assert grad_weight.shape == layer.weight.shape
            assert grad_bias.shape == layer.bias.shape

    def test_backward_gradients(self):
        rng = np.random.default_rng(4)
        params = FgnParams.initialize(2, blocks=2, layers_per_block=2, channels=3, rng=rng)
        for layer in params.layers:
            layer.bias[:] = rng.uniform(0.05, 0.2, layer.bias.shape)
        x = rng.standard_normal((2, 11, 11))
        output, cache = fgn_forward_cached(x, params)
        upstream = rng.standard_normal(output.shape)
        grad_input, layer_grads = fgn_backward(upstream, cache, params)

        def loss():
            return float(np.sum(upstream * fgn_forward(x, params)))

        np.testing.assert_allclose(grad_input, numeric_gradient(loss, x), rtol=1e-3, atol=1e-7)
        for layer, (grad_weight, grad_bias) in zip(params.layers, layer_grads):
            np.testing.assert_allclose(grad_weight, numeric_gradient(loss, layer.weight), rtol=1e-3, atol=1e-7)
            np.testing.assert_allclose(grad_bias, numeric_gradient(loss, layer.bias), rtol=1e-3, atol=1e-7)


class TestCrossCorrelate:

    def test_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            channels = int(rng.integers(1, 9))
            sh, sw = rng.integers(5, 17, 2)
            th, tw = rng.integers(1, 6, 2)
            search = rng.standard_normal((channels, sh, sw))
            target = rng.standard_normal((channels, th, tw))
            np.testing.assert_allclose(cross_correlate(search, target), naive_correlation(search, target),
                                       atol=1e-12)

    def test_self_correlation(self):
        target = np.random.default_rng(1).standard_normal((3, 4, 4))
        result = cross_correlate(target, target)
        assert result.shape == (1, 1)
        assert result[0, 0] == pytest.approx(np.sum(target ** 2))

    def test_one_hot(self):
        search = np.zeros((1, 5, 5))
        search[0, 2, 3] = 1
        np.testing.assert_array_equal(cross_correlate(search, np.ones((1, 1, 1))), search[0])

    def test_errors(self):
        with pytest.raises(ShapeError):
            cross_correlate(np.zeros((2, 5, 5)), np.zeros((3, 3, 3)))
        with pytest.raises(ShapeError):
            cross_correlate(np.zeros((2, 5, 5)), np.zeros((2, 6, 3)))

    def test_backward(self):
        rng = np.random.default_rng(2)
        search = rng.standard_normal((3, 9, 8))
        target = rng.standard_normal((3, 3, 4))
        upstream = rng.standard_normal((7, 5))
        grad_search, grad_target = cross_correlate_backward(upstream, search, target)

        def loss():
            return float(np.sum(upstream * cross_correlate(search, target)))

        np.testing.assert_allclose(grad_search, numeric_gradient(loss, search), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(grad_target, numeric_gradient(loss, target), rtol=1e-6, atol=1e-8)


class TestBicubicResize:

    def test_constant(self):
        values = np.full((3, 4), 2.5)
        for dims in [(1, 1), (7, 9), (16, 16), (2, 3)]:
            np.testing.assert_allclose(bicubic_resize(values, dims), 2.5, atol=1e-12)

    def test_rows_sum_to_one(self):
        for size_in, size_out in [(2, 4), (5, 3), (7, 21), (1, 4)]:
            np.testing.assert_allclose(resize_matrix(size_in, size_out).sum(axis=1), 1.0, atol=1e-12)

    def test_linear(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 2, 5, 6))
        np.testing.assert_allclose(bicubic_resize(a + b, (11, 8)),
                                   bicubic_resize(a, (11, 8)) + bicubic_resize(b, (11, 8)), atol=1e-9)

    @pytest.mark.parametrize('factor', [3, 5])
    def test_odd_factor_reproduces_source(self, factor):
        values = np.random.default_rng(factor).standard_normal((4, 5))
        result = bicubic_resize(values, (4 * factor, 5 * factor))
        centre = factor // 2
        np.testing.assert_allclose(result[centre::factor, centre::factor], values, atol=1e-6)

    def test_identity_size(self):
        values = np.random.default_rng(1).standard_normal((2, 6, 7))
        np.testing.assert_allclose(bicubic_resize(values, (6, 7)), values, atol=1e-12)

    def test_monotone_ramps(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            length = int(rng.integers(2, 12))
            factor = int(rng.integers(2, 6))
            ramp = rng.uniform(-5, 5) + np.arange(length) * rng.uniform(0.1, 3)
            result = bicubic_resize(ramp[None, :], (1, length * factor))[0]
            assert np.all(np.diff(result) >= -1e-12)

    def test_zero_output(self):
        with pytest.raises(ShapeError):
            bicubic_resize(np.ones((3, 3)), (0, 3))

    def test_backward(self):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((2, 4, 5))
        upstream = rng.standard_normal((2, 9, 7))
        grad = bicubic_resize_backward(upstream, (4, 5))

        def loss():
            return float(np.sum(upstream * bicubic_resize(values, (9, 7))))

        np.testing.assert_allclose(grad, numeric_gradient(loss, values), rtol=1e-6, atol=1e-8)


class TestWeightedBce:

    def test_midpoint(self):
        loss, _ = weighted_bce(np.zeros((1, 1)), LossSpec(np.full((1, 1), 0.5), np.ones((1, 1))))
        assert loss == pytest.approx(math.log(2))

    def test_saturation(self):
        spec = LossSpec(np.ones((2, 2)), np.ones((2, 2)))
        loss, grad = weighted_bce(np.full((2, 2), 800.0), spec)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        pred = rng.standard_normal((5, 5))
        spec = LossSpec(rng.uniform(0, 1, (5, 5)), rng.uniform(0, 3, (5, 5)))
        _, grad = weighted_bce(pred, spec)
        numeric = numeric_gradient(lambda: weighted_bce(pred, spec)[0], pred)
        np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-10)

    def test_errors(self):
        spec = LossSpec(np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(NonFiniteError):
            weighted_bce(np.array([[0.0, np.nan], [0.0, 0.0]]), spec)
        with pytest.raises(ShapeError):
            weighted_bce(np.zeros((3, 2)), spec)
        with pytest.raises(ConfigError):
            LossSpec(np.zeros((2, 2)), -np.ones((2, 2)))


class TestAdam:

    def test_zero_gradient(self):
        params = {'w': np.array([1.0, -2.0])}
        adam_step(params, {'w': np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(params['w'], [1.0, -2.0])

    def test_constant_gradient_step_size(self):
        params = {'w': np.array([0.0, 0.0])}
        optimizer = Adam(params, lr=0.01)
        previous = params['w'].copy()
        for _ in range(200):
            previous = params['w'].copy()
            optimizer.step({'w': np.array([3.0, -0.5])})
        np.testing.assert_allclose(params['w'] - previous, [-0.01, 0.01], rtol=1e-4)
        assert optimizer.state.step == 200

    def test_bounded_moments(self):
        rng = np.random.default_rng(0)
        params = {'w': rng.standard_normal(4)}
        state = AdamState()
        for _ in range(10000):
            adam_step(params, {'w': rng.standard_normal(4)}, state, lr=1e-3)
        assert np.all(np.isfinite(state.m['w']))
        assert np.all(np.isfinite(state.v['w']))
        assert np.all(np.isfinite(params['w']))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({'w': np.zeros(2)}, {'w': np.zeros(3)}, AdamState(), lr=0.1)
