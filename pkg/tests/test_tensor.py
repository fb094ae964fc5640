"""Tensor primitives: forward values, gradients, adjoint and dual-route checks."""

import numpy as np
import pytest

from favae import tensor as T
from favae.tensor import ShapeError, Tensor, backward
from gradcheck import check_gradients


class TestForwardValues:
    def test_conv2d_identity_scale_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.array([[[[2.0]]]]))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_conv2d_full_window_sum(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b, stride=1, padding=0)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.item() == 45.0

    def test_conv2d_matches_direct_reference(self):
        rng = np.random.default_rng(7)
        for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)]:
            x = rng.standard_normal((2, 3, 9, 8))
            k = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            fast = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
            ref = T.conv2d_reference(x, k, b, stride, pad)
            np.testing.assert_allclose(fast, ref, atol=1e-10)

    def test_conv2d_shape_error_names_dimension(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        k = Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(x, k, Tensor(np.zeros(4)), 1, 1)

    def test_conv_transpose_ones(self):
        x = Tensor(np.ones((1, 1, 1, 1)))
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv_transpose2d(x, k, None, stride=2, padding=0)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))

    def test_conv_transpose_output_dims(self):
        x = Tensor(np.zeros((1, 2, 5, 5)))
        k = Tensor(np.zeros((2, 3, 4, 4)))
        out = T.conv_transpose2d(x, k, None, stride=2, padding=1, output_padding=0)
        assert out.data.shape == (1, 3, 10, 10)

    def test_conv_transpose_nonpositive_dims_error(self):
        x = Tensor(np.zeros((1, 1, 1, 1)))
        k = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ShapeError, match="non-positive"):
            T.conv_transpose2d(x, k, None, stride=1, padding=1)

    def test_adjoint_identity(self):
        # geometries where the conv output size divides exactly, so the
        # transposed conv maps back onto the full input extent
        rng = np.random.default_rng(3)
        for side, stride, pad in [(8, 1, 0), (8, 2, 1), (9, 3, 2), (8, 4, 0)]:
            x = rng.standard_normal((2, 3, side, side))
            k = rng.standard_normal((5, 3, 4, 4))
            cx = T.conv2d(Tensor(x), Tensor(k), None, stride, pad).data
            y = rng.standard_normal(cx.shape)
            ty = T.conv_transpose2d(Tensor(y), Tensor(k), None, stride, pad, 0).data
            assert ty.shape == x.shape
            lhs = np.sum(cx * y)
            rhs = np.sum(x * ty)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-8)

    def test_leaky_relu_and_sigmoid_values(self):
        x = Tensor(np.array([-1.0, 3.0, 0.0]))
        out = T.leaky_relu(x, 0.2)
        np.testing.assert_allclose(out.data, [-0.2, 3.0, 0.0])
        assert T.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_batchnorm_constant_channel_returns_beta(self):
        x = Tensor(np.full((3, 2, 4, 4), 7.0))
        gamma = Tensor(np.ones(2))
        beta = Tensor(np.array([1.5, -2.0]))
        out = T.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
        np.testing.assert_allclose(out.data[:, 0], 1.5)
        np.testing.assert_allclose(out.data[:, 1], -2.0)

    def test_batchnorm_standardized_input_passthrough(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 3, 6, 6))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                            np.zeros(3), np.ones(3), training=True)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_batchnorm_running_stats_update(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 2, 5, 5)) * 3.0 + 1.0
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      rm, rv, training=True, momentum=0.1)
        m = x.mean(axis=(0, 2, 3))
        cnt = 4 * 25
        v = x.var(axis=(0, 2, 3)) * cnt / (cnt - 1)
        np.testing.assert_allclose(rm, 0.1 * m)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * v)

    def test_bilinear_constant_preserved(self):
        x = Tensor(np.full((1, 2, 3, 3), 4.2))
        out = T.bilinear_upsample(x, 7, 5)
        np.testing.assert_allclose(out.data, 4.2)

    def test_bilinear_half_pixel_row(self):
        x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
        out = T.bilinear_upsample(x, 1, 4)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.25, 0.75, 1.0])

    def test_bilinear_mean_roughly_preserved(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.uniform(0.5, 1.5, size=(1, 1, 6, 6))
            out = T.bilinear_upsample(Tensor(x), 13, 17)
            assert abs(out.data.mean() - x.mean()) < 0.1 * abs(x.mean())

    def test_bilinear_rejects_downscale(self):
        with pytest.raises(ShapeError):
            T.bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), 2, 4)

    def test_maxpool_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = T.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out.data.ravel(), [5, 7, 13, 15])


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum_grad(self):
        data = np.arange(-2.0, 4.0).reshape(2, 3)
        x = Tensor(data, requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            backward(x * 2.0)

    def test_grad_accumulates_across_calls(self):
        x = Tensor(np.ones(4), requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, 2 * np.ones(4))

    def test_gradient_stop_blocks_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.gradient_stop(x)
        np.testing.assert_array_equal(y.data, x.data)
        loss = (y * y).sum() + x.sum()
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        z = (y + x).sum()
        tape = T.Tape.trace(z)
        pos = {id(t): i for i, t in enumerate(tape.ops)}
        for node in tape.ops:
            for parent in node._inputs:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]

    def test_forward_deterministic(self):
        rng_a = np.random.default_rng(5)
        rng_b = np.random.default_rng(5)
        xa = rng_a.standard_normal((2, 3, 8, 8))
        xb = rng_b.standard_normal((2, 3, 8, 8))
        k = np.arange(36.0).reshape(1, 4, 3, 3)[:, :3]
        oa = T.conv2d(Tensor(xa), Tensor(k), None, 1, 1).data
        ob = T.conv2d(Tensor(xb), Tensor(k), None, 1, 1).data
        assert np.array_equal(oa, ob)


class TestGradChecks:
    """Finite-difference checks for each primitive (20 seeds in acceptance)."""

    @pytest.mark.parametrize("seed", range(3))
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_gradients(lambda x_, k_, b_: T.conv2d(x_, k_, b_, 2, 1).sum(), [x, k, b])

    @pytest.mark.parametrize("seed", range(3))
    def test_conv_transpose2d(self, seed):
        rng = np.random.default_rng(seed + 10)
        x = rng.standard_normal((2, 3, 4, 4))
        k = rng.standard_normal((3, 2, 4, 4))
        b = rng.standard_normal(2)
        check_gradients(
            lambda x_, k_, b_: (T.conv_transpose2d(x_, k_, b_, 2, 1, 1).square()).sum(),
            [x, k, b],
        )

    @pytest.mark.parametrize("seed", range(3))
    def test_batchnorm_training(self, seed):
        rng = np.random.default_rng(seed + 20)
        x = rng.standard_normal((4, 3, 4, 4))
        g = rng.standard_normal(3)
        b = rng.standard_normal(3)

        def loss(x_, g_, b_):
            out = T.batchnorm2d(x_, g_, b_, np.zeros(3), np.ones(3), training=True)
            return (out.square()).sum()

        check_gradients(loss, [x, g, b], rtol=1e-4)

    def test_batchnorm_eval(self):
        rng = np.random.default_rng(30)
        x = rng.standard_normal((2, 3, 4, 4))
        rm = rng.standard_normal(3)
        rv = rng.uniform(0.5, 2.0, 3)

        def loss(x_, g_, b_):
            out = T.batchnorm2d(x_, g_, b_, rm, rv, training=False)
            return (out.square()).sum()

        check_gradients(loss, [x, rng.standard_normal(3), rng.standard_normal(3)])

    @pytest.mark.parametrize("seed", range(3))
    def test_activations(self, seed):
        rng = np.random.default_rng(seed + 40)
        x = rng.standard_normal((3, 7)) + 0.05  # keep away from the relu kink
        check_gradients(lambda t: (T.leaky_relu(t, 0.2).square()).sum(), [x])
        check_gradients(lambda t: (T.sigmoid(t).square()).sum(), [x])

    @pytest.mark.parametrize("seed", range(3))
    def test_bilinear(self, seed):
        rng = np.random.default_rng(seed + 50)
        x = rng.standard_normal((2, 2, 3, 4))
        check_gradients(lambda t: (T.bilinear_upsample(t, 7, 9).square()).sum(), [x])

    def test_resize_downscale_grad(self):
        rng = np.random.default_rng(60)
        x = rng.standard_normal((1, 2, 6, 6))
        check_gradients(lambda t: (T.resize_bilinear(t, 3, 4).square()).sum(), [x])

    def test_maxpool_grad(self):
        rng = np.random.default_rng(70)
        x = rng.standard_normal((2, 2, 6, 6))
        check_gradients(lambda t: (T.maxpool2d(t, 2, 2).square()).sum(), [x])

    def test_broadcast_channels_grad(self):
        rng = np.random.default_rng(80)
        v = rng.standard_normal(3)
        x = rng.standard_normal((2, 3, 4, 4))

        def loss(v_, x_):
            return (T.broadcast_channels(v_, (2, 3, 4, 4)) * x_).sum()

        check_gradients(loss, [v, x])

    @pytest.mark.parametrize("seed", range(3))
    def test_composed_chain(self, seed):
        rng = np.random.default_rng(seed + 90)
        x = rng.standard_normal((2, 2, 6, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        g = rng.uniform(0.5, 1.5, 3)
        b = rng.standard_normal(3)

        def loss(x_, k_, g_, b_):
            h = T.conv2d(x_, k_, None, 2, 1)
            h = T.batchnorm2d(h, g_, b_, np.zeros(3), np.ones(3), training=True)
            h = T.leaky_relu(h, 0.2)
            return h.sum()

        check_gradients(loss, [x, k, g, b], rtol=1e-4)
