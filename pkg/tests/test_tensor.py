#!/usr/bin/env python3
"""
Tests for Tensor Kernels
========================
Forward semantics and finite-difference gradient checks for every layer kernel.
"""

import numpy as np
import pytest

from affectcae import tensor as T
from affectcae.errors import NumericError, ParameterError, ShapeError


def numeric_grad(fn, x, eps=1e-6):
    """Central-difference gradient of scalar fn at x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        plus = fn(x)
        x[idx] = orig - eps
        minus = fn(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestInputValidation:
    """Test as_tensor and padding helpers"""

    def test_as_tensor_converts_to_float64(self):
        arr = T.as_tensor([[1, 2], [3, 4]])
        assert arr.dtype == np.float64
        assert arr.shape == (2, 2)

    def test_as_tensor_rejects_nan(self):
        with pytest.raises(NumericError):
            T.as_tensor([1.0, np.nan])

    def test_as_tensor_rejects_inf(self):
        with pytest.raises(NumericError):
            T.as_tensor([1.0, np.inf])

    def test_as_tensor_rejects_empty_extent(self):
        with pytest.raises(ShapeError):
            T.as_tensor(np.zeros((0, 3)))

    def test_as_tensor_shape_check(self):
        with pytest.raises(ShapeError):
            T.as_tensor(np.zeros((2, 3)), shape=(3, 2))

    def test_same_padding_odd_pixel_after(self):
        assert T.same_padding(3) == (1, 1)
        assert T.same_padding(2) == (0, 1)
        assert T.same_padding(1) == (0, 0)


class TestConvolution:
    """Test conv2d forward and backward"""

    def test_same_padding_keeps_extent(self, rng):
        x = rng.standard_normal((2, 8, 8, 3))
        for k in (2, 3):
            out, _ = T.conv2d_forward(x, rng.standard_normal((k, k, 3, 4)), np.zeros(4), "same")
            assert out.shape == (2, 8, 8, 4)

    def test_valid_padding_shrinks(self, rng):
        x = rng.standard_normal((1, 8, 8, 1))
        out, _ = T.conv2d_forward(x, rng.standard_normal((3, 3, 1, 2)), np.zeros(2), "valid")
        assert out.shape == (1, 6, 6, 2)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 5, 5, 1))
        kernel = np.zeros((3, 3, 1, 1))
        kernel[1, 1, 0, 0] = 1.0
        out, _ = T.conv2d_forward(x, kernel, np.array([0.5]), "same")
        np.testing.assert_allclose(out, x + 0.5)

    def test_cross_correlation_orientation(self):
        x = np.zeros((1, 3, 3, 1))
        x[0, 1, 2, 0] = 1.0
        kernel = np.zeros((3, 3, 1, 1))
        kernel[1, 2, 0, 0] = 1.0  # picks the right neighbour
        out, _ = T.conv2d_forward(x, kernel, np.zeros(1), "same")
        assert out[0, 1, 1, 0] == 1.0

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv2d_forward(rng.standard_normal((1, 4, 4, 2)), rng.standard_normal((3, 3, 3, 1)), np.zeros(1))

    def test_unknown_padding(self, rng):
        with pytest.raises(ParameterError):
            T.conv2d_forward(rng.standard_normal((1, 4, 4, 1)), rng.standard_normal((3, 3, 1, 1)), np.zeros(1), "full")

    @pytest.mark.parametrize("kernel,padding", [(3, "same"), (2, "same"), (3, "valid")])
    def test_gradients(self, rng, kernel, padding):
        x = rng.standard_normal((2, 6, 6, 2))
        w = rng.standard_normal((kernel, kernel, 2, 3))
        b = rng.standard_normal(3)
        out, cache = T.conv2d_forward(x, w, b, padding)
        upstream = rng.standard_normal(out.shape)
        dx, dw, db = T.conv2d_backward(upstream, cache)

        def loss_x(v):
            return float(np.sum(T.conv2d_forward(v, w, b, padding)[0] * upstream))

        def loss_w(v):
            return float(np.sum(T.conv2d_forward(x, v, b, padding)[0] * upstream))

        def loss_b(v):
            return float(np.sum(T.conv2d_forward(x, w, v, padding)[0] * upstream))

        assert rel_error(dx, numeric_grad(loss_x, x.copy())) < 1e-6
        assert rel_error(dw, numeric_grad(loss_w, w.copy())) < 1e-6
        assert rel_error(db, numeric_grad(loss_b, b.copy())) < 1e-6


class TestPooling:
    """Test max pooling and upsampling"""

    def test_maxpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        out, _ = T.maxpool2d_forward(x)
        np.testing.assert_array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])

    def test_maxpool_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        _, indices = T.maxpool2d_forward(x)
        assert indices[0, 0, 0, 0] == 0
        dx = T.maxpool2d_backward(np.ones((1, 1, 1, 1)), indices)
        np.testing.assert_array_equal(dx[0, :, :, 0], [[1, 0], [0, 0]])

    def test_maxpool_odd_extent(self):
        with pytest.raises(ShapeError):
            T.maxpool2d_forward(np.zeros((1, 5, 4, 1)))

    def test_maxpool_gradient(self, rng):
        x = rng.standard_normal((2, 4, 4, 3))
        out, indices = T.maxpool2d_forward(x)
        upstream = rng.standard_normal(out.shape)
        dx = T.maxpool2d_backward(upstream, indices)

        def loss(v):
            return float(np.sum(T.maxpool2d_forward(v)[0] * upstream))

        assert rel_error(dx, numeric_grad(loss, x.copy())) < 1e-6

    def test_upsample_repeats_pixels(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = T.upsample2d_forward(x)
        assert out.shape == (1, 4, 4, 1)
        np.testing.assert_array_equal(out[0, :2, :2, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(out[0, 2:, 2:, 0], np.full((2, 2), 4.0))

    def test_upsample_gradient_sums_blocks(self, rng):
        upstream = rng.standard_normal((1, 4, 4, 2))
        dx = T.upsample2d_backward(upstream)
        np.testing.assert_allclose(dx[0, 0, 0], upstream[0, :2, :2].sum(axis=(0, 1)))


class TestDense:
    """Test dense layer"""

    def test_forward(self):
        out, _ = T.dense_forward(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([0.5]))
        assert out[0, 0] == pytest.approx(3.5)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense_forward(np.ones((1, 3)), np.ones((2, 1)), np.zeros(1))

    def test_gradients(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(4)
        out, cache = T.dense_forward(x, w, b)
        upstream = rng.standard_normal(out.shape)
        dx, dw, db = T.dense_backward(upstream, cache)
        assert rel_error(dx, numeric_grad(lambda v: float(np.sum(T.dense_forward(v, w, b)[0] * upstream)), x.copy())) < 1e-6
        assert rel_error(dw, numeric_grad(lambda v: float(np.sum(T.dense_forward(x, v, b)[0] * upstream)), w.copy())) < 1e-6
        np.testing.assert_allclose(db, upstream.sum(axis=0))


class TestBatchNorm:
    """Test batch normalization modes, running statistics and gradients"""

    def test_train_normalizes_per_channel(self, rng):
        x = rng.standard_normal((8, 4, 4, 3)) * 5 + 2
        out, _, _ = T.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), "train")
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-3)

    def test_running_statistics_momentum(self, rng):
        x = rng.standard_normal((6, 3))
        _, _, (mean, var) = T.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), "train")
        np.testing.assert_allclose(mean, 0.01 * x.mean(axis=0))
        np.testing.assert_allclose(var, 0.99 + 0.01 * x.var(axis=0))

    def test_eval_uses_running_statistics(self):
        x = np.array([[3.0], [5.0]])
        out, _, stats = T.batchnorm_forward(x, np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), "eval")
        np.testing.assert_allclose(out[:, 0], 2.0 * (x[:, 0] - 1.0) / np.sqrt(4.0 + 1e-5) + 1.0)
        np.testing.assert_array_equal(stats[0], [1.0])

    def test_train_batch_of_one_rejected(self):
        with pytest.raises(ParameterError):
            T.batchnorm_forward(np.ones((1, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), "train")

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, rng, mode):
        x = rng.standard_normal((4, 3, 3, 2))
        gamma = rng.standard_normal(2)
        beta = rng.standard_normal(2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        out, cache, _ = T.batchnorm_forward(x, gamma, beta, rm, rv, mode)
        upstream = rng.standard_normal(out.shape)
        dx, dgamma, dbeta = T.batchnorm_backward(upstream, cache)

        def run(xv, gv, bv):
            return float(np.sum(T.batchnorm_forward(xv, gv, bv, rm, rv, mode)[0] * upstream))

        assert rel_error(dx, numeric_grad(lambda v: run(v, gamma, beta), x.copy())) < 1e-5
        assert rel_error(dgamma, numeric_grad(lambda v: run(x, v, beta), gamma.copy())) < 1e-5
        assert rel_error(dbeta, numeric_grad(lambda v: run(x, gamma, v), beta.copy())) < 1e-5


class TestActivations:
    """Test activation functions"""

    def test_softmax_rows_sum_to_one(self, rng):
        out, _ = T.activation_forward(rng.standard_normal((4, 7)) * 50, "softmax")
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        assert np.all(np.isfinite(out))

    def test_unknown_activation(self):
        with pytest.raises(ParameterError):
            T.activation_forward(np.zeros(2), "sigmoid")

    @pytest.mark.parametrize("kind", ["relu", "tanh", "softmax", "linear"])
    def test_gradients(self, rng, kind):
        x = rng.standard_normal((3, 5))
        if kind == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        out, cache = T.activation_forward(x, kind)
        upstream = rng.standard_normal(out.shape)
        dx = T.activation_backward(upstream, cache, kind)
        expected = numeric_grad(lambda v: float(np.sum(T.activation_forward(v, kind)[0] * upstream)), x.copy())
        assert rel_error(dx, expected) < 1e-6


class TestDropout:
    """Test inverted dropout"""

    def test_eval_is_identity(self, rng):
        x = rng.standard_normal((4, 4))
        out, mask = T.dropout_forward(x, 0.5, "eval")
        assert mask is None
        np.testing.assert_array_equal(out, x)

    def test_seeded_mask_is_reproducible(self):
        x = np.ones((10, 10))
        a, _ = T.dropout_forward(x, 0.3, "train", seed=7)
        b, _ = T.dropout_forward(x, 0.3, "train", seed=7)
        np.testing.assert_array_equal(a, b)

    def test_survivors_scaled(self):
        out, _ = T.dropout_forward(np.ones((50, 50)), 0.5, "train", seed=1)
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("rate", [0.25, 0.5])
    def test_expected_value_preserved(self, rate):
        out, _ = T.dropout_forward(np.ones(100_000), rate, "train", seed=11)
        assert abs(out.mean() - 1.0) < 0.02

    def test_rate_out_of_range(self):
        with pytest.raises(ParameterError):
            T.dropout_forward(np.ones(3), 1.0, "train")

    def test_backward_applies_mask(self):
        out, mask = T.dropout_forward(np.ones((5, 5)), 0.4, "train", seed=3)
        np.testing.assert_array_equal(T.dropout_backward(np.ones((5, 5)), mask), out)
