"""Layers and losses against brute-force oracles and finite differences."""

import math

import numpy as np
import pytest

from oracles import conv2d_naive, conv_transpose2d_naive, maxpool2x2_naive
from wavemixlite.engine import (Tensor, backward, grad_check, no_grad,
                                tensor_sum)
from wavemixlite.ops import (BatchNorm2d, Conv2dLayer, ConvTranspose2dLayer,
                             batch_norm2d, conv2d, conv_transpose2d,
                             focal_loss, gelu, global_avg_pool, max_pool2d,
                             softmax_cross_entropy, upsample_bilinear)
from wavemixlite.engine import ShapeError


def rand(shape, seed, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def make_conv(c_in, c_out, k, stride=1, padding=0, seed=0, dtype=np.float32):
    layer = Conv2dLayer(c_in, c_out, k, stride, padding,
                        rng=np.random.default_rng(seed), dtype=dtype)
    return layer


class TestConv2d:
    def test_1x1_identity(self):
        layer = make_conv(3, 3, 1)
        layer.weight.data = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        layer.bias.data[:] = 0
        x = Tensor(rand((2, 3, 5, 5), 1))
        assert np.allclose(conv2d(x, layer).data, x.data, atol=1e-7)

    def test_all_ones_sum(self):
        layer = make_conv(1, 1, 2)
        layer.weight.data[:] = 1
        layer.bias.data[:] = 0
        x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        out = conv2d(x, layer)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 4.0

    def test_matches_naive_oracle(self):
        layer = make_conv(3, 8, 3, seed=2, dtype=np.float64)
        x = Tensor(rand((1, 3, 6, 6), 3, np.float64))
        out = conv2d(x, layer)
        expect = conv2d_naive(x.data, layer.weight.data, layer.bias.data, 1, 0)
        assert np.allclose(out.data, expect, rtol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 4, 8, 8), (2, 3, 5, 7)])
    @pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (2, 1, 1), (3, 2, 1), (4, 2, 0)])
    def test_geometry_sweep_vs_oracle(self, shape, k, stride, pad):
        if shape[2] + 2 * pad < k:
            pytest.skip("kernel larger than padded input")
        layer = make_conv(shape[1], 3, k, stride, pad, seed=k * 10 + stride, dtype=np.float64)
        x = Tensor(rand(shape, 101, np.float64))
        out = conv2d(x, layer)
        expect = conv2d_naive(x.data, layer.weight.data, layer.bias.data, stride, pad)
        assert out.data == pytest.approx(expect, rel=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(rand((1, 2, 4, 4), 1)), make_conv(3, 1, 3))

    def test_degenerate_output_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(rand((1, 1, 2, 2), 1)), make_conv(1, 1, 3))

    def test_gradcheck(self):
        layer = make_conv(2, 3, 3, stride=1, padding=1, seed=4, dtype=np.float64)

        def f(x):
            return tensor_sum(gelu(conv2d(x, layer)))

        x = Tensor(rand((1, 2, 5, 5), 5, np.float64), requires_grad=True)
        assert grad_check(f, x) < 1e-6

    def test_weight_bias_gradcheck(self):
        x = Tensor(rand((2, 2, 4, 4), 6, np.float64))
        layer = make_conv(2, 3, 3, padding=1, seed=7, dtype=np.float64)
        loss = tensor_sum(conv2d(x, layer))
        backward(loss)
        gw = layer.weight.grad.copy()
        # finite differences on a few weight entries
        eps = 1e-6
        rng = np.random.default_rng(8)
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in layer.weight.shape)
            orig = layer.weight.data[idx]
            layer.weight.data[idx] = orig + eps
            with no_grad():
                fp = tensor_sum(conv2d(x, layer)).item()
            layer.weight.data[idx] = orig - eps
            with no_grad():
                fm = tensor_sum(conv2d(x, layer)).item()
            layer.weight.data[idx] = orig
            assert gw[idx] == pytest.approx((fp - fm) / (2 * eps), rel=1e-5)


class TestConvTranspose2d:
    def test_shape_formula(self):
        layer = ConvTranspose2dLayer(1, 3, 4, 2, 1, rng=np.random.default_rng(0))
        out = conv_transpose2d(Tensor(rand((1, 1, 2, 2), 1)), layer)
        assert out.shape == (1, 3, 4, 4)

    def test_delta_input_reproduces_kernel_stencil(self):
        layer = ConvTranspose2dLayer(1, 1, 4, 2, 1, rng=np.random.default_rng(2), dtype=np.float64)
        layer.bias.data[:] = 0
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        out = conv_transpose2d(Tensor(x, dtype=np.float64), layer)
        expect = conv_transpose2d_naive(x, layer.weight.data, layer.bias.data, 2, 1)
        assert np.allclose(out.data, expect)
        # the delta scatters the kernel (cropped by padding) around position (2,2)
        assert np.allclose(out.data[0, 0, 1:5, 1:5], layer.weight.data[0, 0])

    def test_matches_scatter_oracle(self):
        layer = ConvTranspose2dLayer(3, 2, 4, 2, 1, rng=np.random.default_rng(3), dtype=np.float64)
        x = Tensor(rand((2, 3, 4, 5), 4, np.float64))
        out = conv_transpose2d(x, layer)
        expect = conv_transpose2d_naive(x.data, layer.weight.data, layer.bias.data, 2, 1)
        assert out.data == pytest.approx(expect, rel=1e-9)

    def test_doubles_resolution_with_k4s2p1(self):
        layer = ConvTranspose2dLayer(2, 2, 4, 2, 1, rng=np.random.default_rng(5))
        out = conv_transpose2d(Tensor(rand((1, 2, 6, 10), 6)), layer)
        assert out.shape == (1, 2, 12, 20)

    @pytest.mark.parametrize("trial", range(5))
    def test_adjoint_of_conv2d(self, trial):
        # <conv(x), y> == <x, conv_T(y)> for matching geometry and weights
        rng = np.random.default_rng(trial)
        conv = make_conv(2, 3, 4, stride=2, padding=1, seed=trial, dtype=np.float64)
        conv.bias.data[:] = 0
        # conv weight (C_out, C_in, k, k) is read as (C_in_t, C_out_t, k, k)
        # by the transposed layer, which is exactly the adjoint pairing
        deconv = ConvTranspose2dLayer(3, 2, 4, 2, 1, rng=np.random.default_rng(trial), dtype=np.float64)
        deconv.weight.data = conv.weight.data.copy()
        deconv.bias.data[:] = 0
        x = Tensor(rng.standard_normal((1, 2, 8, 8)))
        with no_grad():
            cx = conv2d(x, conv)
        y = Tensor(rng.standard_normal(cx.shape))
        with no_grad():
            ty = conv_transpose2d(y, deconv)
        lhs = float((cx.data * y.data).sum())
        rhs = float((x.data * ty.data).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_gradcheck(self):
        layer = ConvTranspose2dLayer(2, 2, 4, 2, 1, rng=np.random.default_rng(9), dtype=np.float64)

        def f(x):
            return tensor_sum(conv_transpose2d(x, layer))

        x = Tensor(rand((1, 2, 3, 3), 10, np.float64), requires_grad=True)
        assert grad_check(f, x) < 1e-6

    def test_channel_mismatch(self):
        layer = ConvTranspose2dLayer(3, 2, 4, 2, 1, rng=np.random.default_rng(0))
        with pytest.raises(ShapeError):
            conv_transpose2d(Tensor(rand((1, 2, 4, 4), 1)), layer)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))).item() == 0.0

    def test_asymptote(self):
        out = gelu(Tensor(np.full((1, 1, 1, 1), 10.0, dtype=np.float64)))
        assert abs(out.item() - 10.0) < 1e-6

    def test_value_at_one(self):
        # oracle: 1 * Phi(1) with Phi from math.erf
        expect = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        out = gelu(Tensor(np.ones((1, 1, 1, 1), dtype=np.float64)))
        assert out.item() == pytest.approx(expect, abs=1e-12)
        assert out.item() == pytest.approx(0.8413447, abs=1e-7)

    def test_gradcheck(self):
        def f(x):
            return tensor_sum(gelu(x))

        for seed in range(3):
            x = Tensor(rand((2, 2, 3, 3), seed, np.float64), requires_grad=True)
            assert grad_check(f, x) < 1e-6


class TestBatchNorm:
    def test_normalizes_batch(self):
        layer = BatchNorm2d(3, dtype=np.float64)
        x = Tensor(rand((4, 3, 5, 5), 1, np.float64) * 3.0 + 1.5)
        out = batch_norm2d(x, layer)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-4

    def test_gamma_zero_outputs_beta(self):
        layer = BatchNorm2d(2)
        layer.gamma.data[:] = 0
        layer.beta.data[:] = 0.75
        out = batch_norm2d(Tensor(rand((2, 2, 4, 4), 2)), layer)
        assert np.allclose(out.data, 0.75)

    def test_running_stats_update(self):
        layer = BatchNorm2d(1, momentum=0.1, dtype=np.float64)
        x = rand((2, 1, 4, 4), 3, np.float64) * 2.0 + 5.0
        batch_norm2d(Tensor(x), layer)
        m = x.mean()
        v = x.var() * x.size / (x.size - 1)
        assert layer.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * m)
        assert layer.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * v)

    def test_eval_uses_running_stats(self):
        layer = BatchNorm2d(1, dtype=np.float64)
        layer.running_mean[:] = 2.0
        layer.running_var[:] = 4.0
        layer.training = False
        x = Tensor(np.full((1, 1, 2, 2), 4.0))
        out = batch_norm2d(x, layer)
        assert np.allclose(out.data, (4.0 - 2.0) / np.sqrt(4.0 + layer.eps))

    def test_single_element_rejected_in_train(self):
        layer = BatchNorm2d(1)
        with pytest.raises(ShapeError):
            batch_norm2d(Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32)), layer)

    def test_gradcheck_2x3x4x4(self):
        layer = BatchNorm2d(3, dtype=np.float64)
        layer.gamma.data[:] = rand((3,), 4, np.float64) + 1.5
        layer.beta.data[:] = rand((3,), 5, np.float64)

        def f(x):
            return tensor_sum(gelu(batch_norm2d(x, layer)))

        x = Tensor(rand((2, 3, 4, 4), 6, np.float64), requires_grad=True)
        assert grad_check(f, x, eps=1e-5) < 1e-5


class TestMaxPool:
    def test_2x2_block(self):
        x = Tensor(np.array([[1., 2.], [3., 4.]], dtype=np.float32).reshape(1, 1, 2, 2))
        assert max_pool2d(x).item() == 4.0

    def test_constant_image(self):
        x = Tensor(np.full((1, 2, 6, 6), 3.5, dtype=np.float32))
        out = max_pool2d(x)
        assert out.shape == (1, 2, 3, 3)
        assert np.allclose(out.data, 3.5)

    def test_vs_naive_oracle(self):
        x = Tensor(rand((1, 1, 6, 6), 7))
        assert np.array_equal(max_pool2d(x).data, maxpool2x2_naive(x.data))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            max_pool2d(Tensor(rand((1, 1, 5, 6), 8)))

    def test_tie_routes_to_first_index(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float64)
        t = Tensor(x, requires_grad=True)
        backward(tensor_sum(max_pool2d(t)))
        expect = np.zeros((1, 1, 2, 2))
        expect[0, 0, 0, 0] = 1.0
        assert np.array_equal(t.grad, expect)

    def test_gradcheck(self):
        def f(x):
            return tensor_sum(max_pool2d(x))

        x = Tensor(rand((1, 2, 4, 4), 9, np.float64), requires_grad=True)
        assert grad_check(f, x) < 1e-6


class TestUpsampleBilinear:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((1, 2, 3, 3), 1.25, dtype=np.float32))
        out = upsample_bilinear(x, 2)
        assert out.shape == (1, 2, 6, 6)
        assert np.allclose(out.data, 1.25, atol=1e-6)

    def test_1x1_input(self):
        x = Tensor(np.full((1, 1, 1, 1), 0.7, dtype=np.float32))
        out = upsample_bilinear(x, 2)
        assert out.shape == (1, 1, 2, 2)
        assert np.allclose(out.data, 0.7)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        with no_grad():
            ux = upsample_bilinear(x, 2)
        y = rng.standard_normal(ux.shape)
        # adjoint computed through backward
        x2 = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
        out = upsample_bilinear(x2, 2)
        from wavemixlite.engine import record

        def proj(t):
            def bwd(gout):
                return (np.broadcast_to(y, t.shape).copy(),)
            return record(np.array((t.data * y).sum()).reshape(1, 1, 1, 1), (t,), bwd)

        backward(proj(out))
        lhs = float((ux.data * y).sum())
        rhs = float((x.data * x2.grad).sum())
        assert lhs == pytest.approx(rhs, rel=1e-6)

    def test_factor_below_one_rejected(self):
        with pytest.raises(ShapeError):
            upsample_bilinear(Tensor(rand((1, 1, 2, 2), 1)), 0)

    def test_gradcheck(self):
        def f(x):
            return tensor_sum(gelu(upsample_bilinear(x, 2)))

        x = Tensor(rand((1, 1, 3, 3), 11, np.float64), requires_grad=True)
        assert grad_check(f, x) < 1e-6


class TestGlobalAvgPool:
    def test_constant(self):
        x = Tensor(np.full((2, 3, 4, 4), 2.5, dtype=np.float32))
        out = global_avg_pool(x)
        assert out.shape == (2, 3, 1, 1)
        assert np.allclose(out.data, 2.5)

    def test_mean_value(self):
        x = Tensor(np.array([[1., 3.], [5., 7.]], dtype=np.float32).reshape(1, 1, 2, 2))
        assert global_avg_pool(x).item() == 4.0

    def test_gradient_uniform(self):
        x = Tensor(rand((1, 2, 4, 4), 12, np.float64), requires_grad=True)
        backward(tensor_sum(global_avg_pool(x)))
        assert np.allclose(x.grad, 1.0 / 16.0)
        assert grad_check(lambda t: tensor_sum(global_avg_pool(t)),
                          Tensor(rand((1, 2, 4, 4), 13, np.float64), requires_grad=True)) < 1e-8


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        for c in (2, 10, 37):
            logits = Tensor(np.zeros((4, c, 1, 1), dtype=np.float64))
            loss = softmax_cross_entropy(logits, np.zeros(4, dtype=np.int64))
            assert loss.item() == pytest.approx(math.log(c), rel=1e-12)

    def test_saturated_logit(self):
        logits = np.zeros((1, 5, 1, 1), dtype=np.float64)
        logits[0, 2] = 1000.0
        loss = softmax_cross_entropy(Tensor(logits), np.array([2]))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_two_class_vs_direct_formula(self):
        rng = np.random.default_rng(14)
        z = rng.standard_normal((6, 2, 1, 1))
        t = rng.integers(0, 2, size=6)
        loss = softmax_cross_entropy(Tensor(z, dtype=np.float64), t)
        # oracle: direct high-precision evaluation
        direct = 0.0
        for i in range(6):
            p = np.exp(z[i, t[i], 0, 0]) / np.exp(z[i, :, 0, 0]).sum()
            direct -= np.log(p)
        assert loss.item() == pytest.approx(direct / 6, rel=1e-12)

    def test_pixelwise_shape(self):
        rng = np.random.default_rng(15)
        z = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
        t = rng.integers(0, 3, size=(2, 4, 4))
        loss = softmax_cross_entropy(z, t)
        assert loss.shape == (1, 1, 1, 1)
        assert loss.item() > 0

    def test_target_out_of_range(self):
        z = Tensor(np.zeros((1, 3, 1, 1), dtype=np.float32))
        with pytest.raises(ShapeError):
            softmax_cross_entropy(z, np.array([3]))

    def test_gradcheck(self):
        rng = np.random.default_rng(16)
        t = rng.integers(0, 4, size=(2, 2, 2))

        def f(x):
            return softmax_cross_entropy(x, t)

        x = Tensor(rng.standard_normal((2, 4, 2, 2)), dtype=np.float64, requires_grad=True)
        assert grad_check(f, x) < 1e-7


class TestFocalLoss:
    def test_gamma_zero_equals_cross_entropy(self):
        rng = np.random.default_rng(17)
        z = rng.standard_normal((3, 5, 2, 2))
        t = rng.integers(0, 5, size=(3, 2, 2))
        a = focal_loss(Tensor(z, dtype=np.float64), t, gamma=0.0)
        b = softmax_cross_entropy(Tensor(z, dtype=np.float64), t)
        assert a.item() == pytest.approx(b.item(), abs=1e-7)

    def test_confident_prediction_vanishes(self):
        z = np.zeros((1, 3, 1, 1), dtype=np.float64)
        z[0, 1] = 50.0
        loss = focal_loss(Tensor(z), np.array([1]), gamma=2.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_half_probability_value(self):
        # p_t = 0.5, gamma = 2 -> 0.25 * ln 2 per pixel
        z = np.zeros((1, 2, 1, 1), dtype=np.float64)
        loss = focal_loss(Tensor(z), np.array([0]), gamma=2.0)
        assert loss.item() == pytest.approx(0.25 * math.log(2.0), rel=1e-12)

    def test_negative_gamma_rejected(self):
        with pytest.raises(ShapeError):
            focal_loss(Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32)), np.array([0]), gamma=-1.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(18)
        t = rng.integers(0, 3, size=(2, 2, 2))

        def f(x):
            return focal_loss(x, t, gamma=2.0)

        x = Tensor(rng.standard_normal((2, 3, 2, 2)), dtype=np.float64, requires_grad=True)
        assert grad_check(f, x) < 1e-7
