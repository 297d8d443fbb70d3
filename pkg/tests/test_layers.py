import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sit_mlp import tensor_engine as te
from sit_mlp.errors import ConfigError, ContractError, ShapeError, StateError
from sit_mlp.layers import (
    BatchNorm,
    ChannelLinear,
    Layer,
    LayerList,
    SpatialLinear,
    TemporalConv,
    TemporalMaxPool,
    init_params,
    kaiming_bound,
)
from sit_mlp.tensor_engine import Tensor


class TestChannelLinear:
    def test_hand_arithmetic(self):
        lin = ChannelLinear(2, 1)
        lin.weight.data[...] = [[1.0], [1.0]]
        out = lin(Tensor([[1.0, 2.0]]))
        assert_array_equal(out.data, [[3.0]])

    def test_identity_weight_is_identity_map(self, rng):
        lin = ChannelLinear(3, 3)
        lin.weight.data[...] = np.eye(3)
        x = Tensor(rng.normal(size=(2, 4, 5, 3)))
        assert_array_equal(lin(x).data, x.data)

    def test_kaiming_init(self):
        lin = ChannelLinear(6, 8, rng=np.random.default_rng(0))
        bound = kaiming_bound(6)
        assert np.all(np.abs(lin.weight.data) <= bound)
        assert_array_equal(lin.bias.data, np.zeros(8))

    def test_param_count(self):
        assert ChannelLinear(3, 64).count_params() == 256

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ChannelLinear(3, 4)(Tensor(np.zeros((2, 5))))

    def test_joint_and_frame_locality(self, rng):
        lin = ChannelLinear(3, 5, rng=rng)
        x = rng.normal(size=(2, 4, 6, 3))
        moved = x.copy()
        moved[1, 2, 3] += 1.0
        a, b = lin(Tensor(x)).data, lin(Tensor(moved)).data
        changed = np.any(a != b, axis=-1)
        expected = np.zeros((2, 4, 6), dtype=bool)
        expected[1, 2, 3] = True
        assert_array_equal(changed, expected)


class TestSpatialLinear:
    def test_identity_init_is_identity_map(self, rng):
        sp = SpatialLinear(5, 4, heads=2)
        x = Tensor(rng.normal(size=(2, 3, 5, 4)))
        assert_array_equal(sp(x).data, x.data)

    def test_heads_mix_their_own_channel_slice(self, rng):
        sp = SpatialLinear(3, 4, heads=2)
        perm = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        sp.weight.data[0] = perm
        x = rng.normal(size=(1, 2, 3, 4))
        out = sp(Tensor(x)).data
        assert_allclose(out[..., :2], np.einsum("uv,btvc->btuc", perm, x[..., :2]))
        assert_allclose(out[..., 2:], x[..., 2:])

    def test_bias_is_per_head_and_joint(self):
        sp = SpatialLinear(3, 4, heads=2, bias=True, init="zeros")
        sp.bias.data[...] = [[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]]
        out = sp(Tensor(np.zeros((1, 1, 3, 4)))).data[0, 0]
        assert_array_equal(out[:, :2], [[1, 1], [2, 2], [3, 3]])
        assert_array_equal(out[:, 2:], [[10, 10], [20, 20], [30, 30]])

    def test_param_count(self):
        assert SpatialLinear(25, 8, heads=1).count_params() == 625

    def test_frame_and_head_locality(self, rng):
        sp = SpatialLinear(5, 6, heads=3, init="kaiming-uniform", rng=rng)
        x = rng.normal(size=(2, 4, 5, 6))
        moved = x.copy()
        moved[:, 1, :, 2:4] += rng.normal(size=(2, 5, 2))
        a, b = sp(Tensor(x)).data, sp(Tensor(moved)).data
        others = [0, 2, 3]
        assert_array_equal(a[:, others], b[:, others])
        assert_array_equal(a[:, 1, :, :2], b[:, 1, :, :2])
        assert_array_equal(a[:, 1, :, 4:], b[:, 1, :, 4:])
        assert not np.array_equal(a[:, 1, :, 2:4], b[:, 1, :, 2:4])

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            SpatialLinear(4, 6, heads=4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            SpatialLinear(4, 4)(Tensor(np.zeros((1, 2, 5, 4))))


class TestTemporal:
    def test_conv_stride_arithmetic(self):
        conv = TemporalConv(2, 3, kernel=5, dilation=2, stride=2)
        out = conv(Tensor(np.zeros((1, 2, 8, 4))))
        assert out.shape == (1, 3, 4, 4)
        assert conv.output_length(8) == 4

    def test_output_length_matches_window_enumeration(self):
        for kernel, dilation, stride in itertools.product(range(1, 6), repeat=3):
            padding = te.same_padding(kernel, dilation) if kernel % 2 else 0
            for frames in range(1, 21):
                padded = frames + 2 * padding
                starts = [t for t in range(0, padded, stride) if t + dilation * (kernel - 1) < padded]
                length = te.conv_output_length(frames, kernel, dilation, stride, padding)
                assert max(length, 0) == len(starts), (kernel, dilation, stride, frames)

    def test_conv_layer_output_length(self):
        for kernel, dilation, stride in itertools.product((1, 3, 5), range(1, 6), range(1, 6)):
            conv = TemporalConv(1, 1, kernel, dilation, stride)
            for frames in range(1, 21):
                out = conv(Tensor(np.zeros((1, 1, frames, 2))))
                assert out.shape[2] == conv.output_length(frames), (kernel, dilation, stride, frames)

    def test_conv_rejects_even_kernel(self):
        with pytest.raises(ConfigError):
            TemporalConv(2, 2, kernel=4)

    def test_pool_keeps_length(self):
        out = TemporalMaxPool(3)(Tensor(np.zeros((2, 3, 8, 4))))
        assert out.shape == (2, 3, 8, 4)


class TestBatchNorm:
    def test_running_statistics(self, rng):
        bn = BatchNorm(3)
        x = rng.normal(2.0, 3.0, size=(8, 3))
        bn(Tensor(x))
        assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=0))
        assert_allclose(bn.running_var.data, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_eval_uses_running_statistics(self, rng):
        bn = BatchNorm(2)
        bn.running_mean.data[...] = [1.0, -1.0]
        bn.running_var.data[...] = [4.0, 1.0]
        bn.eval()
        out = bn(Tensor([[3.0, 0.0]])).data
        assert_allclose(out, [[2.0 / np.sqrt(4.0 + 1e-5), 1.0 / np.sqrt(1.0 + 1e-5)]])

    def test_train_needs_two_samples(self):
        with pytest.raises(ContractError):
            BatchNorm(2)(Tensor(np.zeros((1, 2))))

    def test_buffers_are_state_not_parameters(self):
        bn = BatchNorm(4)
        assert bn.count_params() == 8
        assert set(bn.state_dict()) == {"gamma", "beta", "running_mean", "running_var"}


class Pair(Layer):
    def __init__(self):
        super().__init__()
        self.first = ChannelLinear(2, 3)
        self.rest = LayerList([ChannelLinear(3, 3), BatchNorm(3)])

    def forward(self, x):
        return self.rest[1](self.rest[0](self.first(x)))


class TestContainers:
    def test_named_parameters_are_dotted(self):
        names = [name for name, _ in Pair().named_parameters()]
        assert names == ["first.weight", "first.bias", "rest.0.weight", "rest.0.bias", "rest.1.gamma", "rest.1.beta"]

    def test_state_roundtrip(self, rng):
        a, b = Pair(), Pair()
        for p in a.parameters():
            p.data[...] = rng.normal(size=p.shape)
        a.rest[1].running_mean.data[...] = 5.0
        b.load_state_dict(a.state_dict())
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_strict_load_rejects_mismatch(self):
        state = Pair().state_dict()
        state.pop("first.bias")
        with pytest.raises(StateError):
            Pair().load_state_dict(state)
        bad = Pair().state_dict()
        bad["first.weight"] = Tensor(np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            Pair().load_state_dict(bad)

    def test_train_eval_propagates(self):
        p = Pair().eval()
        assert not p.rest[1].training
        p.train()
        assert p.rest[1].training

    def test_zero_grad(self):
        p = Pair()
        with te.Tape() as tape:
            loss = te.reduce("sum", p(Tensor(np.arange(8.0).reshape(4, 2))))
        te.backward(loss, tape)
        assert p.first.weight.grad is not None
        p.zero_grad()
        assert all(param.grad is None for param in p.parameters())


class TestInitParams:
    def test_identity_only_for_spatial(self):
        with pytest.raises(ConfigError):
            init_params(ChannelLinear(2, 2), "identity")

    def test_binary_graph(self):
        adjacency = np.array([[1, 1, 0], [0, 1, 1], [0, 0, 1]])
        sp = SpatialLinear(3, 4, heads=2, init="binary-graph", adjacency=adjacency)
        assert_array_equal(sp.weight.data, np.stack([adjacency, adjacency]))

    def test_binary_graph_validates(self):
        with pytest.raises(ConfigError):
            SpatialLinear(3, 2, init="binary-graph")
        with pytest.raises(ConfigError):
            SpatialLinear(3, 2, init="binary-graph", adjacency=np.full((3, 3), 0.5))
        with pytest.raises(ConfigError):
            SpatialLinear(3, 2, init="binary-graph", adjacency=np.eye(4))

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            init_params(ChannelLinear(2, 2), "xavier")

    def test_zeros(self):
        lin = ChannelLinear(2, 2)
        init_params(lin, "zeros")
        assert not lin.weight.data.any()
