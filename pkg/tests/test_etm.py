import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkt import tensor as T
from hkt.blocks import BlockNet
from hkt.errors import DimensionError, OrderingError, ValidationError
from hkt.etm import (CHILD_TO_PARENT, PARENT_TO_CHILD, ActivationCache, AttentionProbe, EtmStage,
                     TransferAdapter, build_stages, etm_fuse, extract, genetic_attention, transfer)
from hkt.gradcheck import grad_check
from hkt.tensor import Tensor

import oracles

seeds = st.integers(0, 2**31 - 1)


def vector_stage(d, lam, seed=0):
    return EtmStage(1, TransferAdapter((d,), (d,), seed, "c"), TransferAdapter((d,), (d,), seed, "p"), lam)


def random_shape(draw_seed):
    rng = np.random.default_rng(draw_seed)
    if rng.random() < 0.5:
        return (int(rng.integers(1, 4)), int(rng.integers(1, 7)))
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))


class TestWorkedExample:
    def test_two_position_residual(self):
        seen = {}
        out = genetic_attention(Tensor([[2.0, 4.0]]), Tensor([[1.0, 0.0]]),
                                hook=lambda a, r: seen.update(alpha=a.copy()))
        assert np.allclose(seen["alpha"][0], [[0.11920, 0.88080], [0.5, 0.5]], atol=1e-4)
        assert np.allclose(out.data, [[-1.7616, 1.0]], atol=1e-3)
        ref = oracles.genetic_attention_vec([[2.0, 4.0]], [[1.0, 0.0]])
        assert np.max(np.abs(out.data - np.array(ref))) < 1e-12

    def test_fuse_with_lambda_one(self):
        stage = vector_stage(2, 1.0)
        out = etm_fuse(stage, Tensor([[2.0, 4.0]]), Tensor([[10.0, 10.0]]), PARENT_TO_CHILD)
        # the query is the receiver itself, so attention saturates on the larger key
        ref = oracles.add([[10.0, 10.0]], oracles.genetic_attention_vec([[2.0, 4.0]], [[10.0, 10.0]]))
        assert np.max(np.abs(out.data - np.array(ref))) < 1e-12
        assert np.allclose(out.data, [[8.0, 10.0]], atol=1e-3)
        out = etm_fuse(stage, Tensor([[2.0, 4.0]]), Tensor([[1.0, 0.0]]), PARENT_TO_CHILD)
        assert np.allclose(out.data, [[1.0 - 1.7616, 1.0]], atol=1e-3)


class TestIdentities:
    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_output_shape_matches_input(self, seed):
        shape = random_shape(seed)
        rng = np.random.default_rng(seed)
        out = genetic_attention(Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape)))
        assert out.shape == shape

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_position_constant_values_vanish(self, seed):
        shape = random_shape(seed)
        rng = np.random.default_rng(seed)
        v = np.empty(shape)
        if len(shape) == 2:
            v[:] = rng.normal(size=(shape[0], 1))
        else:
            v[:] = rng.normal(size=(shape[0], shape[1], 1, 1))
        out = genetic_attention(Tensor(v), Tensor(rng.normal(scale=3, size=shape)))
        assert np.max(np.abs(out.data)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_single_position_vanishes(self, seed):
        rng = np.random.default_rng(seed)
        shape = (2, int(rng.integers(1, 5)), 1, 1) if seed % 2 else (2, 1)
        out = genetic_attention(Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape)))
        assert np.max(np.abs(out.data)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_lambda_zero_is_bitwise_identity(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 6))
        x = rng.normal(size=(3, d))
        stage = vector_stage(d, 0.0, seed)
        out = etm_fuse(stage, Tensor(rng.normal(size=(3, d))), Tensor(x), CHILD_TO_PARENT)
        assert out.data.tobytes() == x.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_attention_rows_sum_to_one(self, seed):
        shape = random_shape(seed)
        rng = np.random.default_rng(seed)
        probe = AttentionProbe()
        genetic_attention(Tensor(rng.normal(scale=4, size=shape)), Tensor(rng.normal(scale=4, size=shape)),
                          hook=probe.hook(1, PARENT_TO_CHILD))
        assert probe.records[0]["row_sum_max_dev"] < 1e-9

    def test_fusion_does_not_mutate_inputs(self):
        rng = np.random.default_rng(0)
        z, x = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 4, 4))
        stage = EtmStage(1, TransferAdapter((3, 4, 4), (2, 4, 4), 0, "c"),
                         TransferAdapter((2, 4, 4), (3, 4, 4), 0, "p"), 0.7)
        zc, xc = z.copy(), x.copy()
        etm_fuse(stage, Tensor(z), Tensor(x), PARENT_TO_CHILD)
        assert np.array_equal(z, zc) and np.array_equal(x, xc)

    def test_constant_transferred_value_leaves_receiver(self):
        stage = vector_stage(3, 0.9)
        stage.tau_c.weight.data[...] = 0.0
        stage.tau_c.bias.data[...] = 1.5
        x = np.random.default_rng(1).normal(size=(2, 3))
        out = etm_fuse(stage, Tensor(np.ones((2, 3))), Tensor(x), PARENT_TO_CHILD)
        assert np.max(np.abs(out.data - x)) <= 1e-12


class TestSpatialAttention:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        v, q = rng.normal(size=(2, 3, 2, 3)), rng.normal(size=(2, 3, 2, 3))
        ref = np.array(oracles.genetic_attention_map(v.tolist(), q.tolist()))
        assert np.max(np.abs(genetic_attention(Tensor(v), Tensor(q)).data - ref)) < 1e-12

    def test_batch_entries_do_not_interact(self):
        rng = np.random.default_rng(3)
        v, q = rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2))
        full = genetic_attention(Tensor(v), Tensor(q)).data
        single = genetic_attention(Tensor(v[1:2]), Tensor(q[1:2])).data
        assert np.array_equal(full[1:2], single)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            genetic_attention(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4))))


class TestTransfer:
    def test_identity_adapter(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 4, 4))
        assert np.array_equal(transfer(TransferAdapter((3, 4, 4), (3, 4, 4)), Tensor(x)).data, x)

    def test_channel_and_size_contract(self):
        ad = TransferAdapter((8, 16, 16), (4, 8, 8))
        assert transfer(ad, Tensor(np.ones((2, 8, 16, 16)))).shape == (2, 4, 8, 8)

    def test_composition_of_oracles(self):
        rng = np.random.default_rng(5)
        ad = TransferAdapter((3, 4, 4), (2, 6, 6), seed=3)
        ad.bias.data[...] = rng.normal(size=2)
        x = rng.normal(size=(2, 3, 4, 4))
        mapped = oracles.conv1x1(x.tolist(), ad.weight.data.tolist(), ad.bias.data.tolist())
        ref = np.array(oracles.bilinear_resize(mapped, 6, 6))
        assert np.max(np.abs(transfer(ad, Tensor(x)).data - ref)) < 1e-12

    def test_source_mismatch(self):
        with pytest.raises(DimensionError):
            transfer(TransferAdapter((3,), (2,)), Tensor(np.ones((1, 4))))


class TestExtractAndStages:
    def test_extract_returns_cached_tensor(self):
        net = BlockNet.build("child", "mlp:4|head:3", (2,))
        x = Tensor(np.ones((2, 2)))
        cache = ActivationCache()
        act = net.stage_forward(1, x)
        cache.store(net, 1, act)
        assert extract(net, 1, cache) is act
        assert extract(net, 1, cache) is extract(net, 1, cache)
        assert np.array_equal(extract(net, 1, cache).data, net.stage_forward(1, x).data)

    def test_extract_before_compute(self):
        net = BlockNet.build("child", "mlp:4|head:3", (2,))
        with pytest.raises(OrderingError):
            extract(net, 2, ActivationCache())

    def test_build_stages_shapes(self):
        parent = BlockNet.build("parent", "conv:8/2|conv:8/2|head:3", (3, 8, 8))
        child = BlockNet.build("child", "conv:2|conv:2/4|head:3", (3, 8, 8))
        stages = build_stages(parent, child, lam=0.3)
        assert len(stages) == 2
        x = Tensor(np.ones((1, 3, 8, 8)))
        z1, zt1 = child.stage_forward(1, x), parent.stage_forward(1, x)
        assert transfer(stages[0].tau_c, zt1).shape == z1.shape
        assert transfer(stages[0].tau_p, z1).shape == zt1.shape

    def test_stage_count_mismatch(self):
        with pytest.raises(DimensionError):
            build_stages(BlockNet.build("p", "mlp:4|head:3", (2,)), BlockNet.build("c", "head:3", (2,)))

    def test_lambda_range(self):
        with pytest.raises(ValidationError):
            vector_stage(2, 1.5)

    def test_unknown_direction(self):
        with pytest.raises(ValidationError):
            etm_fuse(vector_stage(2, 0.5), Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), "sideways")


@pytest.mark.parametrize("shape", [(2, 4), (2, 3, 2, 2)])
def test_fuse_gradients(shape):
    rng = np.random.default_rng(6)
    src_shape = shape if len(shape) == 2 else (2, 2, 4, 4)
    stage = EtmStage(1, TransferAdapter(src_shape[1:], shape[1:], 1, "c"),
                     TransferAdapter(shape[1:], src_shape[1:], 1, "p"), 0.6)
    z = Tensor(rng.normal(size=src_shape), requires_grad=True)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    w = Tensor(rng.normal(size=shape))
    params = [z, x, stage.tau_c.weight, stage.tau_c.bias]
    assert grad_check(lambda: T.sum_all(T.mul(etm_fuse(stage, z, x, PARENT_TO_CHILD), w)), params) < 1e-4
