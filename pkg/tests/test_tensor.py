import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from effnetv2 import tensor as T
from effnetv2.tensor import Tensor
from gradcheck import OP_CASES, check_op
from oracles import direct_conv2d, direct_depthwise, naive_matmul


def seeded(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestConv2d:
    def test_identity_kernel_is_identity(self):
        x = seeded(2, 4, 5, 5).astype(np.float32)
        w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_nested_loop_oracle(self):
        x, w = seeded(1, 2, 5, 5, seed=1), seeded(3, 2, 3, 3, seed=2)
        out = T.conv2d(Tensor(x), Tensor(w), stride=1)
        assert np.max(np.abs(out.data - direct_conv2d(x, w, 1))) < 1e-5

    @pytest.mark.parametrize("k,stride,size", [(3, 2, 5), (5, 1, 6), (5, 2, 7), (3, 2, 6), (1, 2, 5)])
    def test_other_geometries_match_oracle(self, k, stride, size):
        x, w = seeded(2, 3, size, size, seed=3), seeded(2, 3, k, k, seed=4)
        out = T.conv2d(Tensor(x), Tensor(w), stride=stride)
        assert np.max(np.abs(out.data - direct_conv2d(x, w, stride))) < 1e-5

    def test_stride_two_same_padding_shape(self):
        out = T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)
        assert out.shape == (1, 1, 3, 3)

    def test_valid_padding(self):
        out = T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))), padding="valid")
        assert out.shape == (1, 2, 3, 3)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_finite_input(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(T.NonFiniteError):
            T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))

    @pytest.mark.parametrize("kwargs", [{"stride": 3}, {"padding": "full"}])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), **kwargs)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))))


class TestDepthwise:
    def test_zero_weight_gives_zero(self):
        out = T.depthwise_conv2d(Tensor(seeded(2, 3, 6, 6)), Tensor(np.zeros((3, 1, 3, 3))))
        assert not out.data.any()

    @pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (5, 1), (5, 2)])
    def test_matches_per_channel_oracle(self, k, stride):
        x, w = seeded(2, 3, 7, 7, seed=5), seeded(3, 1, k, k, seed=6)
        out = T.depthwise_conv2d(Tensor(x), Tensor(w), stride)
        assert np.max(np.abs(out.data - direct_depthwise(x, w, stride))) < 1e-5

    def test_equals_conv2d_per_channel(self):
        x, w = seeded(2, 4, 6, 6, seed=7), seeded(4, 1, 3, 3, seed=8)
        with T.precision("float64"):
            dw = T.depthwise_conv2d(Tensor(x), Tensor(w)).data
            per = np.concatenate(
                [T.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1])).data for c in range(4)], axis=1
            )
        assert np.max(np.abs(dw - per)) < 1e-6

    def test_weight_shape_checked(self):
        with pytest.raises(T.ShapeError):
            T.depthwise_conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        with T.precision("float64"):
            x = Tensor(seeded(8, 3, 4, 4) * 5 + 2)
            out = T.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)
        assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) < 1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)

    def test_constant_channel_gives_beta(self):
        x = np.full((4, 2, 3, 3), 7.0)
        beta = np.array([0.5, -1.5])
        out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(beta), np.zeros(2), np.ones(2), True)
        np.testing.assert_allclose(out.data[:, 0], 0.5)
        np.testing.assert_allclose(out.data[:, 1], -1.5)

    def test_running_mean_unrolled_momentum(self):
        with T.precision("float64"):
            rm, rv = np.full(2, 0.3), np.ones(2)
            x1, x2 = seeded(4, 2, 3, 3, seed=1) + 1, seeded(4, 2, 3, 3, seed=2) - 2
            g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
            T.batch_norm(Tensor(x1), g, b, rm, rv, True, momentum=0.99)
            T.batch_norm(Tensor(x2), g, b, rm, rv, True, momentum=0.99)
        m1, m2 = x1.mean(axis=(0, 2, 3)), x2.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(rm, (1 - 0.99) * m2 + 0.99 * ((1 - 0.99) * m1 + 0.99 * 0.3), rtol=1e-12)

    def test_eval_mode_uses_running_stats(self):
        x = seeded(2, 2, 3, 3)
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        before = rm.copy()
        out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
        expected = (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-3)
        np.testing.assert_allclose(out.data, expected, rtol=1e-5)
        np.testing.assert_array_equal(rm, before)


class TestElementwise:
    def test_silu_zero(self):
        assert T.silu(Tensor(np.zeros((1, 1, 1, 1)))).data.item() == 0.0

    def test_silu_definition(self):
        x = np.linspace(-8, 8, 33)
        with T.precision("float64"):
            out = T.silu(Tensor(x)).data
        np.testing.assert_allclose(out, x / (1 + np.exp(-x)), rtol=1e-12)

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_global_avg_pool_constant(self):
        out = T.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5)))
        assert out.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(out.data, 2.5)

    def test_fully_connected_matches_naive(self):
        x, w, b = seeded(2, 8, seed=1), seeded(3, 8, seed=2), seeded(3, seed=3)
        with T.precision("float64"):
            out = T.fully_connected(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(x, w, b))) < 1e-6

    def test_fully_connected_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.fully_connected(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 1))))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(seeded(2, 3, 4, 4))
        for training in (True, False):
            np.testing.assert_array_equal(T.dropout(x, 0.0, training, T.make_rng(0)).data, x.data)

    def test_eval_identity(self):
        x = Tensor(seeded(2, 3, 4, 4))
        assert T.dropout(x, 0.7, False) is x

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), 1.0, True, T.make_rng(0))

    def test_monte_carlo_drop_fraction(self):
        x = Tensor(np.ones(10**6))
        out = T.dropout(x, 0.5, True, T.make_rng(123)).data
        dropped = np.mean(out == 0)
        assert abs(dropped - 0.5) < 0.003
        assert abs(out.mean() - 1.0) < 0.01

    def test_same_seed_same_mask(self):
        x = Tensor(seeded(4, 4, 3, 3))
        a = T.dropout(x, 0.3, True, T.make_rng(9)).data
        b = T.dropout(x, 0.3, True, T.make_rng(9)).data
        np.testing.assert_array_equal(a, b)


class TestStochasticDepth:
    def test_survival_one_is_residual_sum(self):
        a, b = Tensor(seeded(3, 2, 2, 2, seed=1)), Tensor(seeded(3, 2, 2, 2, seed=2))
        out = T.stochastic_depth(a, b, 1.0, True, T.make_rng(0))
        np.testing.assert_allclose(out.data, a.data + b.data)

    def test_eval_is_deterministic_sum(self):
        a, b = Tensor(seeded(3, 2, 2, 2, seed=1)), Tensor(seeded(3, 2, 2, 2, seed=2))
        out1 = T.stochastic_depth(a, b, 0.5, False, T.make_rng(0))
        out2 = T.stochastic_depth(a, b, 0.5, False, T.make_rng(1))
        np.testing.assert_array_equal(out1.data, out2.data)
        np.testing.assert_allclose(out1.data, a.data + b.data)

    def test_skip_fraction(self):
        n = 10**5
        out = T.stochastic_depth(Tensor(np.ones((n, 1, 1, 1))), Tensor(np.zeros((n, 1, 1, 1))), 0.8, True,
                                 T.make_rng(5)).data.reshape(-1)
        assert abs(np.mean(out == 0) - 0.2) < 0.01
        np.testing.assert_allclose(out[out != 0], 1 / 0.8, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.stochastic_depth(Tensor(np.ones((2, 1, 1, 1))), Tensor(np.ones((2, 2, 1, 1))), 0.8, False)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(seeded(2, 3, 2, 2), requires_grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(x.shape))

    def test_sum_of_squares(self):
        with T.precision("float64"):
            x = Tensor(seeded(2, 3, 2, 2), requires_grad=True)
            T.backward(T.sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_fan_out_accumulates(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = T.silu(x)
        T.backward(T.sum(T.add(y, T.add(y, x))))
        s = 1 / (1 + np.exp(-1.0))
        np.testing.assert_allclose(x.grad, 2 * s * (1 + (1 - s)) + 1, rtol=1e-6)

    def test_non_scalar_rejected(self):
        with pytest.raises(T.ShapeError):
            T.backward(Tensor(np.ones(3), requires_grad=True))

    def test_tape_order_is_execution_order(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        a = T.silu(x)
        b = T.sigmoid(a)
        loss = T.sum(T.add(a, b))
        tape = T.Tape.from_loss(loss)
        seqs = [n._seq for n in tape]
        assert seqs == sorted(seqs) and len(set(map(id, tape))) == len(tape) == 5

    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_gradients_match_finite_differences(self, name):
        for seed in range(3):
            assert check_op(name, seed) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3),
    c=st.integers(1, 4),
    size=st.integers(3, 9),
    k=st.sampled_from([1, 3, 5]),
    stride=st.sampled_from([1, 2]),
)
def test_conv_output_shape_is_ceil(n, c, size, k, stride):
    out = T.conv2d(Tensor(np.zeros((n, c, size, size))), Tensor(np.zeros((2, c, k, k))), stride)
    assert out.shape == (n, 2, -(-size // stride), -(-size // stride))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_composed_forward_is_finite(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)) * 10)
    y = T.silu(T.conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3)))))
    y = T.batch_norm(y, Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), True)
    y = T.depthwise_conv2d(y, Tensor(rng.normal(size=(4, 1, 3, 3))), 2)
    out = T.fully_connected(T.global_avg_pool(T.sigmoid(y)), Tensor(rng.normal(size=(3, 4))))
    assert np.isfinite(out.data).all()
