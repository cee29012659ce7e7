import numpy as np
import pytest

from maxsr.errors import GraphError, NonFiniteError, ShapeError
from maxsr.utilities import tensor as T
from maxsr.utilities.gradcheck import finite_diff_grad, relative_error
from maxsr.utilities.tensor import Tensor, backward, default_dtype, no_grad

rng = np.random.default_rng(7)


def leaf(*shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def check_grads(loss_fn, leaves, tolerance=1e-5):
    for tensor in leaves:
        tensor.zero_grad()
    backward(loss_fn())
    for tensor in leaves:
        numeric = finite_diff_grad(lambda _: loss_fn(), tensor)

        assert relative_error(tensor.grad, numeric) < tolerance


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_default_dtype_context(self):
        with default_dtype(np.float64):
            inside = Tensor([1.0])
        outside = Tensor([1.0])

        assert inside.dtype == np.float64 and outside.dtype == np.float32

    def test_default_dtype_rejects_integers(self):
        with pytest.raises(ValueError):
            with default_dtype(np.int32):
                pass

    def test_rank_above_four_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_non_finite_construction_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_item_needs_one_element(self):
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_operators(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])

        assert np.allclose((a + b).data, [4.0, 7.0])
        assert np.allclose((a - b).data, [-2.0, -3.0])
        assert np.allclose((a * b).data, [3.0, 10.0])
        assert np.allclose((a * 2.0 + 1.0).data, [3.0, 5.0])
        assert np.allclose((-a).data, [-1.0, -2.0])


class TestBackward:
    def test_needs_scalar(self):
        x = leaf(2, 2)
        with pytest.raises(GraphError):
            backward(x * 2.0)

    def test_detached_loss(self):
        with pytest.raises(GraphError):
            backward(Tensor([1.0]).sum())

    def test_gradients_accumulate_until_zeroed(self):
        x = leaf(3)
        backward(x.sum())
        backward(x.sum())

        assert np.allclose(x.grad, 2.0)

        x.zero_grad()
        backward(x.sum())

        assert np.allclose(x.grad, 1.0)

    def test_shared_subexpression(self):
        x = leaf(4)
        y = x * x
        backward((y + y).sum())

        assert np.allclose(x.grad, 4.0 * x.data)

    def test_no_grad_records_nothing(self):
        x = leaf(2)
        with no_grad():
            y = x * 3.0

        assert y.creator is None and not y.requires_grad

    def test_forward_nan_raises(self):
        x = Tensor([1e30], dtype=np.float32)
        with pytest.raises(NonFiniteError):
            x * 1e30


class TestElementwise:
    def test_add_broadcast_gradient(self):
        a, b = leaf(2, 3, 2, 2), leaf(1, 3, 1, 1)
        w = rng.standard_normal((2, 3, 2, 2))

        check_grads(lambda: (T.add(a, b) * Tensor(w, dtype=np.float64)).sum(), [a, b])

    def test_mul_gradient(self):
        a, b = leaf(2, 3), leaf(2, 3)

        check_grads(lambda: T.mul(a, b).sum(), [a, b])

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_gelu_values(self):
        out = T.gelu(Tensor([-1.0, 0.0, 1.0], dtype=np.float64)).data

        assert np.allclose(out, [-0.15865525, 0.0, 0.84134475], atol=1e-7)

    def test_activation_gradients(self):
        x = Tensor(
            np.array([-1.5, -0.3, 0.4, 2.0]), requires_grad=True, dtype=np.float64
        )

        check_grads(lambda: T.gelu(x).sum(), [x])
        check_grads(lambda: T.sigmoid(x).sum(), [x])
        check_grads(lambda: T.relu(x).sum(), [x])
        check_grads(lambda: x.abs().mean(), [x])


class TestShapes:
    def test_transpose_and_reshape_gradients(self):
        x = leaf(2, 3, 4)
        w = Tensor(rng.standard_normal((4, 6)), dtype=np.float64)

        check_grads(lambda: (x.transpose(2, 0, 1).reshape(4, 6) * w).sum(), [x])

    def test_reshape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(6)).reshape(4, 2)

    def test_pad_then_crop_restores(self):
        x = Tensor(rng.standard_normal((1, 2, 3, 5)))
        padded = T.pad2d(x, 4, 9)

        assert padded.shape == (1, 2, 4, 9)
        assert np.array_equal(T.crop2d(padded, 3, 5).data, x.data)
        assert np.all(padded.data[..., 3:, :] == 0)
        assert np.all(padded.data[..., 5:] == 0)

    def test_pad_smaller_rejected(self):
        with pytest.raises(ShapeError):
            T.pad2d(Tensor(np.zeros((1, 1, 4, 4))), 3, 4)

    def test_concat_gradient(self):
        a, b = leaf(1, 2, 2, 2), leaf(1, 3, 2, 2)
        w = Tensor(rng.standard_normal((1, 5, 2, 2)), dtype=np.float64)

        check_grads(lambda: (T.concat_channels([a, b]) * w).sum(), [a, b])

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels(
                [Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))]
            )

    def test_take_gradient_accumulates_repeats(self):
        table = leaf(2, 3)
        index = np.array([[0, 0], [2, 1]])
        backward(T.take(table, index).sum())

        assert np.allclose(table.grad, [[2.0, 1.0, 1.0], [2.0, 1.0, 1.0]])


class TestPixelShuffle:
    def test_layout(self):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 4, 1, 2))
        out = T.pixel_shuffle(x, 2)

        assert out.shape == (1, 1, 2, 4)
        assert np.array_equal(out.data[0, 0], [[0, 2, 1, 3], [4, 6, 5, 7]])

    def test_unshuffle_inverts(self):
        x = Tensor(rng.standard_normal((2, 12, 3, 4)))

        assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(x, 2), 2).data, x.data)

    def test_channels_must_divide(self):
        with pytest.raises(ShapeError):
            T.pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)

    def test_gradient(self):
        x = leaf(1, 9, 2, 2)
        w = Tensor(rng.standard_normal((1, 1, 6, 6)), dtype=np.float64)

        check_grads(lambda: (T.pixel_shuffle(x, 3) * w).sum(), [x])


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(rng.standard_normal((1, 1, 4, 5)), dtype=np.float64)
        weight = np.zeros((1, 1, 3, 3))
        weight[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(weight, dtype=np.float64), Tensor(np.zeros(1)), pad=1)

        assert np.allclose(out.data, x.data)

    def test_matches_direct_sum(self):
        x = rng.standard_normal((2, 3, 5, 5))
        weight = rng.standard_normal((4, 3, 3, 3))
        bias = rng.standard_normal(4)
        out = T.conv2d(
            Tensor(x, dtype=np.float64),
            Tensor(weight, dtype=np.float64),
            Tensor(bias, dtype=np.float64),
            pad=1,
        ).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 5, 5))
        for i in range(5):
            for j in range(5):
                patch = padded[:, :, i : i + 3, j : j + 3]
                expected[:, :, i, j] = np.einsum("ncij,ocij->no", patch, weight) + bias

        assert np.allclose(out, expected)

    def test_grouped_equals_separate(self):
        x = rng.standard_normal((1, 4, 4, 4))
        weight = rng.standard_normal((4, 2, 3, 3))
        bias = np.zeros(4)
        grouped = T.conv2d(
            Tensor(x, dtype=np.float64),
            Tensor(weight, dtype=np.float64),
            Tensor(bias, dtype=np.float64),
            pad=1,
            groups=2,
        ).data
        first = T.conv2d(
            Tensor(x[:, :2], dtype=np.float64),
            Tensor(weight[:2], dtype=np.float64),
            Tensor(bias[:2], dtype=np.float64),
            pad=1,
        ).data

        assert np.allclose(grouped[:, :2], first)

    def test_stride_output_shape(self):
        x = Tensor(np.zeros((1, 2, 7, 7)))
        weight, bias = Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3))
        out = T.conv2d(x, weight, bias, stride=2, pad=1)

        assert out.shape == (1, 3, 4, 4)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(
                Tensor(np.zeros((1, 1, 4, 4))),
                Tensor(np.zeros((1, 1, 2, 2))),
                Tensor(np.zeros(1)),
            )

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(
                Tensor(np.zeros((1, 3, 4, 4))),
                Tensor(np.zeros((2, 2, 3, 3))),
                Tensor(np.zeros(2)),
                pad=1,
            )

    def test_gradients(self):
        x, w, b = leaf(2, 2, 4, 4), leaf(3, 2, 3, 3), leaf(3)
        proj = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)

        def loss():
            return (T.conv2d(x, w, b, pad=1) * proj).sum()

        check_grads(loss, [x, w, b])

    def test_strided_gradients(self):
        x, w, b = leaf(2, 2, 5, 5), leaf(3, 2, 3, 3), leaf(3)
        proj = Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=np.float64)

        def loss():
            return (T.conv2d(x, w, b, stride=2, pad=1) * proj).sum()

        assert T.conv2d(x, w, b, stride=2, pad=1).shape == (2, 3, 3, 3)
        check_grads(loss, [x, w, b])


class TestAttentionPrimitives:
    def test_softmax_rows_sum_to_one(self):
        out = T.softmax_lastdim(Tensor(rng.standard_normal((3, 7)) * 30)).data

        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_gradient(self):
        x = leaf(2, 5)
        w = Tensor(rng.standard_normal((2, 5)), dtype=np.float64)

        check_grads(lambda: (T.softmax_lastdim(x) * w).sum(), [x])

    def test_batched_matmul_gradient(self):
        a, b = leaf(2, 3, 4), leaf(2, 4, 2)

        check_grads(lambda: T.batched_matmul(a, b).sum(), [a, b])

    def test_batched_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            T.batched_matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 3, 4))))

    def test_linear_gradient(self):
        x, w, b = leaf(2, 5, 3), leaf(3, 4), leaf(4)
        proj = Tensor(rng.standard_normal((2, 5, 4)), dtype=np.float64)

        check_grads(lambda: (T.linear(x, w, b) * proj).sum(), [x, w, b])


class TestNormalization:
    def test_layer_norm_statistics(self):
        x = Tensor(rng.standard_normal((2, 6, 3, 3)) * 4 + 2, dtype=np.float64)
        out = T.layer_norm(
            x,
            Tensor(np.ones(6), dtype=np.float64),
            Tensor(np.zeros(6), dtype=np.float64),
        ).data

        assert np.allclose(out.mean(axis=1), 0.0, atol=1e-10)
        assert np.allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_layer_norm_gradient(self):
        x, g, b = leaf(2, 4, 2, 2), leaf(4), leaf(4)
        proj = Tensor(rng.standard_normal((2, 4, 2, 2)), dtype=np.float64)

        check_grads(lambda: (T.layer_norm(x, g, b) * proj).sum(), [x, g, b])

    def test_batch_norm_updates_running_stats(self):
        x = Tensor(rng.standard_normal((4, 2, 3, 3)) + 5.0, dtype=np.float64)
        mean, var = np.zeros(2), np.ones(2)
        ones = Tensor(np.ones(2), dtype=np.float64)
        zeros = Tensor(np.zeros(2), dtype=np.float64)
        T.batch_norm(x, ones, zeros, mean, var, training=True, momentum=0.1)

        assert np.allclose(mean, 0.1 * x.data.mean(axis=(0, 2, 3)))

    def test_batch_norm_eval_uses_running_stats(self):
        x = Tensor(np.full((1, 1, 2, 2), 3.0), dtype=np.float64)
        out = T.batch_norm(
            x,
            Tensor(np.ones(1), dtype=np.float64),
            Tensor(np.zeros(1), dtype=np.float64),
            np.array([1.0]),
            np.array([4.0]),
            training=False,
            eps=0.0,
        )

        assert np.allclose(out.data, 1.0)

    def test_batch_norm_training_gradient(self):
        x, g, b = leaf(3, 2, 2, 2), leaf(2), leaf(2)
        mean, var = np.zeros(2), np.ones(2)
        proj = Tensor(rng.standard_normal((3, 2, 2, 2)), dtype=np.float64)

        def loss():
            return (T.batch_norm(x, g, b, mean, var, training=True) * proj).sum()

        check_grads(loss, [x, g, b])


class TestGlobalAvgPool:
    def test_value_and_gradient(self):
        x = leaf(2, 3, 4, 5)

        pooled = T.global_avg_pool(x).data[..., 0, 0]

        assert np.allclose(pooled, x.data.mean(axis=(2, 3)))
        check_grads(lambda: (T.global_avg_pool(x) * 3.0).sum(), [x])
