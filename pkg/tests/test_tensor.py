import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkt import tensor as T
from hkt.errors import DimensionError, NumericError, UsageError, ValidationError
from hkt.gradcheck import grad_check
from hkt.tensor import Tensor

import oracles


def param(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


class TestTensorBasics:
    def test_scalar_promoted(self):
        assert Tensor(3.0).shape == (1,)

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 2)))

    def test_data_is_float64_copy(self):
        src = np.arange(4, dtype=np.int32)
        t = Tensor(src)
        assert t.data.dtype == np.float64
        src[0] = 99
        assert t.data[0] == 0.0

    def test_detach_drops_grad_flag(self):
        t = param([1.0, 2.0])
        d = t.detach()
        assert not d.requires_grad
        assert np.array_equal(d.data, t.data)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]]))
        assert out.data.tolist() == [[1, 2], [3, 4]]

    def test_basis_selection(self):
        assert T.matmul(Tensor([[1, 0]]), Tensor([[2], [4]])).data.tolist() == [[2]]

    def test_random_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ref = np.array(oracles.matmul(a.tolist(), b.tolist()))
        assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - ref)) < 1e-12

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_bmm_matches_per_sample_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
        out = T.bmm(Tensor(a), Tensor(b)).data
        for n in range(2):
            assert np.max(np.abs(out[n] - np.array(oracles.matmul(a[n].tolist(), b[n].tolist())))) < 1e-12

    def test_bmm_outer_product_path(self):
        rng = np.random.default_rng(2)
        a, b = param(rng.normal(size=(2, 3, 1))), param(rng.normal(size=(2, 1, 4)))
        assert np.allclose(T.bmm(a, b).data, a.data * b.data)
        assert grad_check(lambda: T.sum_all(T.mul(T.bmm(a, b), T.bmm(a, b))), [a, b]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        assert T.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]

    def test_single_column(self):
        assert T.softmax_rows(Tensor([[123.4]])).data.tolist() == [[1.0]]

    def test_two_four(self):
        ref = oracles.softmax_row([2.0, 4.0])
        out = T.softmax_rows(Tensor([[2.0, 4.0]])).data[0]
        assert np.allclose(out, [0.11920, 0.88080], atol=1e-4)
        assert np.allclose(out, ref, atol=1e-15)

    def test_large_values_stable(self):
        out = T.softmax_rows(Tensor([[1000.0, 1001.0]])).data
        assert np.all(np.isfinite(out))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, m, n, seed):
        a = np.random.default_rng(seed).normal(scale=5, size=(m, n))
        out = T.softmax_rows(Tensor(a)).data
        assert np.max(np.abs(out.sum(axis=1) - 1)) < 1e-9
        assert np.all(out > 0) and np.all(out <= 1)


class TestConvAndResize:
    def test_conv_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        out = T.conv1x1(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_conv_channel_sum(self):
        x = np.empty((1, 2, 3, 3))
        x[:, 0], x[:, 1] = 3.0, 5.0
        out = T.conv1x1(Tensor(x), Tensor([[1.0, 1.0]]), Tensor([0.0]))
        assert np.all(out.data == 8.0)

    def test_conv_matches_reshape_matmul(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(6, 3)), rng.normal(size=6)
        ref = np.array(oracles.conv1x1(x.tolist(), w.tolist(), b.tolist()))
        flat = x.transpose(0, 2, 3, 1).reshape(-1, 3) @ w.T + b
        assert np.max(np.abs(T.conv1x1(Tensor(x), Tensor(w), Tensor(b)).data - ref)) < 1e-12
        assert np.max(np.abs(flat.reshape(2, 4, 5, 6).transpose(0, 3, 1, 2) - ref)) < 1e-12

    def test_conv_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv1x1(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((3, 3))), Tensor(np.zeros(3)))

    def test_resize_same_size_is_identity(self):
        x = np.random.default_rng(4).normal(size=(1, 2, 5, 3))
        assert np.array_equal(T.bilinear_resize(Tensor(x), 5, 3).data, x)

    def test_resize_constant(self):
        out = T.bilinear_resize(Tensor(np.full((1, 1, 3, 3), 7.5)), 5, 2)
        assert np.allclose(out.data, 7.5, rtol=0, atol=1e-14)

    def test_upsample_2x2_matches_scalar_oracle(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        ref = np.array(oracles.bilinear_resize(x.tolist(), 4, 4))
        out = T.bilinear_resize(Tensor(x), 4, 4).data
        assert np.max(np.abs(out - ref)) < 1e-12
        # frozen oracle output: half-pixel centres give quarter-steps, edges clamp
        expected_row0 = [1.0, 1.25, 1.75, 2.0]
        assert np.allclose(out[0, 0, 0], expected_row0, atol=1e-12)
        assert np.allclose(out[0, 0, :, 0], [1.0, 1.5, 2.5, 3.0], atol=1e-12)

    def test_downsample_matches_scalar_oracle(self):
        x = np.random.default_rng(5).normal(size=(2, 2, 7, 6))
        ref = np.array(oracles.bilinear_resize(x.tolist(), 3, 4))
        assert np.max(np.abs(T.bilinear_resize(Tensor(x), 3, 4).data - ref)) < 1e-12

    def test_resize_rejects_non_positive(self):
        with pytest.raises(DimensionError):
            T.bilinear_resize(Tensor(np.ones((1, 1, 2, 2))), 0, 2)

    def test_avg_pool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert T.avg_pool2d(Tensor(x), 2).data[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]


class TestElementwiseAndLosses:
    def test_add_zeros(self):
        a = np.array([1.0, -2.0])
        assert np.array_equal(T.add(Tensor(a), Tensor(np.zeros(2))).data, a)

    def test_scale_zero(self):
        assert np.all(T.scale(Tensor([3.0, -4.0]), 0.0).data == 0)

    def test_sub_worked_example(self):
        out = T.sub(Tensor([2.0, 4.0]), Tensor([3.7616, 3.0])).data
        assert np.allclose(out, [-1.7616, 1.0], atol=1e-12)

    def test_elementwise_dispatch(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        assert T.elementwise("hadamard", a, b).data.tolist() == [3.0, 10.0]
        assert T.elementwise("scale", a, 2.0).data.tolist() == [2.0, 4.0]
        with pytest.raises(DimensionError):
            T.elementwise("add", a, Tensor([1.0, 2.0, 3.0]))

    def test_mae(self):
        assert T.mae_loss(Tensor([1.0, 3.0]), Tensor([2.0, 5.0])).item() == 1.5
        assert T.mae_loss(Tensor([1.0, 3.0]), Tensor([1.0, 3.0])).item() == 0.0

    def test_mae_random_matches_loop(self):
        rng = np.random.default_rng(6)
        p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        assert abs(T.mae_loss(Tensor(p), Tensor(t)).item() - oracles.mae(p.tolist(), t.tolist())) < 1e-12

    def test_mae_sign_gradient(self):
        a = param([1.0, -2.0, 0.5, 3.0])
        loss = T.mae_loss(a, a.detach() + Tensor([0.5, -1.0, 2.0, -0.1]))
        T.backward(loss)
        assert set(np.round(a.grad * 4, 12)) <= {-1.0, 1.0}

    def test_mae_tie_has_zero_subgradient(self):
        a = param([1.0, 2.0])
        T.backward(T.mae_loss(a, Tensor([1.0, 0.0])))
        assert a.grad.tolist() == [0.0, 0.5]

    def test_cross_entropy_uniform(self):
        assert abs(T.cross_entropy_loss(Tensor([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-12

    def test_cross_entropy_margin_monotone(self):
        losses = [T.cross_entropy_loss(Tensor([[m, 0.0, 0.0]]), [0]).item() for m in (0.0, 1.0, 2.0, 5.0)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_cross_entropy_matches_oracle(self):
        rng = np.random.default_rng(7)
        z, y = rng.normal(scale=3, size=(4, 3)), [0, 2, 1, 2]
        assert abs(T.cross_entropy_loss(Tensor(z), y).item() - oracles.cross_entropy(z.tolist(), y)) < 1e-10

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValidationError):
            T.cross_entropy_loss(Tensor([[0.0, 1.0]]), [2])


class TestBackward:
    def test_sum_gives_ones(self):
        a = param(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum_all(a))
        assert np.array_equal(a.grad, np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        a = param([1.0, 2.0])
        with pytest.raises(UsageError):
            T.backward(T.scale(a, 2.0))

    def test_reuse_accumulates(self):
        a = param([1.0, 2.0])
        T.backward(T.sum_all(T.add(T.mul(a, a), a)))
        assert a.grad.tolist() == [3.0, 5.0]

    def test_grads_accumulate_across_backwards(self):
        a = param([1.0])
        T.backward(T.sum_all(T.scale(a, 3.0)))
        T.backward(T.sum_all(T.scale(a, 3.0)))
        assert a.grad.tolist() == [6.0]

    def test_no_grad_records_nothing(self):
        a = param([1.0, 2.0])
        with T.Tape() as tape:
            with T.no_grad():
                T.sum_all(T.mul(a, a))
            assert len(tape) == 0

    def test_tape_is_topological_and_cleared(self):
        a = param([1.0, 2.0])
        with T.Tape() as tape:
            b = T.mul(a, a)
            c = T.sum_all(b)
            assert len(tape) == 2
            assert b.tape_id < c.tape_id
            T.backward(c)
            assert len(tape) == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_result_raises(self):
        with pytest.raises(NumericError):
            T.scale(Tensor([1e308]), 1e10)


OPS = {
    "matmul": lambda t: T.matmul(t[0], t[1]),
    "softmax": lambda t: T.softmax_rows(t[0]),
    "linear": lambda t: T.linear(t[0], t[1], t[2]),
    "relu": lambda t: T.relu(t[0]),
    "hadamard": lambda t: T.mul(t[0], t[1]),
    "sub": lambda t: T.sub(t[0], t[1]),
    "mean": lambda t: T.mean_all(T.mul(t[0], t[1])),
    "permute": lambda t: T.permute(T.reshape(t[0], (2, 2, 1)), (2, 0, 1)),
}
SHAPES = {
    "matmul": [(2, 3), (3, 2)], "softmax": [(2, 3)], "linear": [(3, 4), (2, 4), (2,)],
    "relu": [(2, 3)], "hadamard": [(2, 3), (2, 3)], "sub": [(2, 3), (2, 3)], "mean": [(2, 2), (2, 2)],
    "permute": [(2, 2)],
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_vector_ops_pass_grad_check(name):
    for point in range(10):
        rng = np.random.default_rng(100 + point)
        params = [param(rng.normal(size=s)) for s in SHAPES[name]]
        weights = Tensor(rng.normal(size=OPS[name](params).shape))
        assert grad_check(lambda: T.sum_all(T.mul(OPS[name](params), weights)), params) < 1e-4


@pytest.mark.parametrize("name", ["conv1x1", "resize_up", "resize_down", "avg_pool", "global_pool"])
def test_spatial_ops_pass_grad_check(name):
    ops = {
        "conv1x1": (lambda t: T.conv1x1(t[0], t[1], t[2]), [(2, 3, 2, 2), (2, 3), (2,)]),
        "resize_up": (lambda t: T.bilinear_resize(t[0], 3, 5), [(1, 2, 2, 3)]),
        "resize_down": (lambda t: T.bilinear_resize(t[0], 2, 2), [(1, 2, 5, 3)]),
        "avg_pool": (lambda t: T.avg_pool2d(t[0], 2), [(1, 2, 4, 4)]),
        "global_pool": (lambda t: T.global_avg_pool(t[0]), [(2, 3, 2, 2)]),
    }
    fn, shapes = ops[name]
    for point in range(10):
        rng = np.random.default_rng(200 + point)
        params = [param(rng.normal(size=s)) for s in shapes]
        weights = Tensor(rng.normal(size=fn(params).shape))
        assert grad_check(lambda: T.sum_all(T.mul(fn(params), weights)), params) < 1e-4


@pytest.mark.parametrize("loss", ["mae", "mse", "ce"])
def test_losses_pass_grad_check(loss):
    for point in range(10):
        rng = np.random.default_rng(300 + point)
        p = param(rng.normal(size=(4, 3)))
        target = Tensor(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 3, size=4)
        fn = {"mae": lambda: T.mae_loss(p, target), "mse": lambda: T.mse_loss(p, target),
              "ce": lambda: T.cross_entropy_loss(p, labels)}[loss]
        assert grad_check(fn, [p]) < 1e-4
