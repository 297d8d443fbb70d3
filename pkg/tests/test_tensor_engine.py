import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sit_mlp import tensor_engine as te
from sit_mlp.errors import ConfigError, ContractError, FormatError, ShapeError, StateError
from sit_mlp.tensor_engine import FlopCounter, Tape, Tensor


def grads_of(f, *inputs):
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    te.backward(loss, tape)
    return [t.grad for t in inputs]


class TestCreate:
    def test_initializers(self):
        assert_array_equal(te.create((2, 3)).data, np.zeros((2, 3)))
        assert_array_equal(te.create((2,), "ones").data, np.ones(2))
        t = te.create((2, 2), "values", values=[1, 2, 3, 4])
        assert_array_equal(t.data, [[1.0, 2.0], [3.0, 4.0]])
        assert not t.requires_grad

    def test_uniform_is_seeded(self):
        a = te.create((3, 4), "uniform", seed=7)
        b = te.create((3, 4), "uniform", seed=7)
        assert_array_equal(a.data, b.data)
        assert np.all((a.data >= -1) & (a.data < 1))

    def test_bad_shapes_and_init(self):
        with pytest.raises(ShapeError):
            te.create((2, -1))
        with pytest.raises(ShapeError):
            te.create((2, 2), "values", values=[1, 2, 3])
        with pytest.raises(ConfigError):
            te.create((2,), "normal")

    def test_item_needs_single_element(self):
        assert te.constant([2.5]).item() == 2.5
        with pytest.raises(ContractError):
            te.constant([1.0, 2.0]).item()


class TestTape:
    def test_broadcast_add_gradients(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones(3))
        ga, gb = grads_of(lambda p, q: te.reduce("sum", p + q), a, b)
        assert_array_equal(ga, np.ones((2, 3)))
        assert_array_equal(gb, np.full(3, 2.0))

    def test_reused_input_accumulates(self):
        x = Tensor([1.5, -2.0])
        (gx,) = grads_of(lambda t: te.reduce("sum", t * t), x)
        assert_allclose(gx, [3.0, -4.0])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            te.backward(y, tape)

    def test_spent_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = te.reduce("sum", x * 2.0)
        te.backward(loss, tape)
        x.grad = None
        with pytest.raises(StateError):
            te.backward(loss, tape)

    def test_stale_gradient_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        for attempt in range(2):
            with Tape() as tape:
                loss = te.reduce("sum", x * 3.0)
            if attempt == 0:
                te.backward(loss, tape)
            else:
                with pytest.raises(StateError):
                    te.backward(loss, tape)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with te.no_grad():
                y = te.relu(x)
        assert len(tape) == 0
        assert not y.requires_grad

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            te.constant([1.0, 2.0]) * 2.0
        assert len(tape) == 0


class TestOps:
    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            te.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_elementwise_unknown_op(self):
        with pytest.raises(ConfigError):
            te.elementwise("div", Tensor([1.0]), Tensor([1.0]))

    def test_not_broadcastable(self):
        with pytest.raises(ShapeError):
            te.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_einsum_validation(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3)))
        with pytest.raises(ConfigError):
            te.einsum("ii,ij->j", a, b)
        with pytest.raises(ConfigError):
            te.einsum("ij,jk->i", a, b)
        with pytest.raises(ConfigError):
            te.einsum("ij,jk", a, b)
        with pytest.raises(ShapeError):
            te.einsum("ij,jk->ik", a, Tensor(np.ones((3, 3))))

    def test_max_routes_gradient_to_argmax(self):
        x = Tensor([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]])
        out = te.reduce("max", x, 1)
        assert_array_equal(out.data, [5.0, 7.0])
        (gx,) = grads_of(lambda t: te.reduce("sum", te.reduce("max", t, 1)), x)
        assert_array_equal(gx, [[0, 1, 0], [1, 0, 0]])

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            te.reduce("sum", Tensor(np.ones((2, 2))), 2)

    def test_softmax_rows_sum_to_one(self, rng):
        s = te.softmax(Tensor(rng.normal(size=(4, 5)) * 10), axis=1)
        assert_allclose(s.data.sum(axis=1), np.ones(4))

    def test_activation_dispatch(self):
        x = Tensor([-1.0, 0.5])
        assert_array_equal(te.activation("relu", x).data, [0.0, 0.5])
        assert te.activation("identity", x) is x
        with pytest.raises(ConfigError):
            te.activation("tanh", x)

    def test_slice_and_concat_invert(self, rng):
        x = Tensor(rng.normal(size=(2, 6)))
        parts = [te.slice_axis(x, 1, 0, 2), te.slice_axis(x, 1, 2, None)]
        assert_array_equal(te.concat(parts, axis=1).data, x.data)


class TestTemporalKernels:
    def test_conv_matches_direct_sum(self, rng):
        B, ci, T, V, co, k, s, d, p = 2, 3, 9, 2, 4, 3, 2, 2, 2
        x = rng.normal(size=(B, ci, T, V))
        w = rng.normal(size=(co, ci, k))
        bias = rng.normal(size=co)
        out = te.temporal_conv(Tensor(x), Tensor(w), Tensor(bias), stride=s, dilation=d, padding=p).data

        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (0, 0)))
        t_out = te.conv_output_length(T, k, d, s, p)
        expected = np.zeros((B, co, t_out, V))
        for t in range(t_out):
            for j in range(k):
                expected[:, :, t, :] += np.einsum("bcv,oc->bov", xp[:, :, t * s + j * d, :], w[:, :, j])
        expected += bias[None, :, None, None]
        assert out.shape == (B, co, t_out, V)
        assert_allclose(out, expected, atol=1e-12)

    def test_same_padding_needs_odd_kernel(self):
        assert te.same_padding(5, 2) == 4
        with pytest.raises(ConfigError):
            te.same_padding(4)

    def test_conv_flop_count(self):
        x = Tensor(np.zeros((1, 4, 8, 2)))
        w = Tensor(np.zeros((4, 4, 5)))
        with FlopCounter() as counter:
            te.temporal_conv(x, w, padding=2)
        assert counter.flops == 2 * 4 * 4 * 5 * 8 * 2 == 2560
        assert counter.macs == 1280

    def test_maxpool_edges_and_gradient(self):
        x = Tensor(np.array([3.0, 1.0, 4.0, 1.0, 5.0]).reshape(1, 1, 5, 1))
        out = te.temporal_maxpool(x, 3)
        assert_array_equal(out.data.reshape(-1), [3, 4, 4, 5, 5])
        (gx,) = grads_of(lambda t: te.reduce("sum", te.temporal_maxpool(t, 3)), x)
        assert_array_equal(gx.reshape(-1), [1, 0, 2, 0, 2])

    def test_maxpool_stride_halves(self):
        out = te.temporal_maxpool(Tensor(np.zeros((1, 2, 8, 3))), 3, stride=2)
        assert out.shape == (1, 2, 4, 3)


class TestNormalizationAndLoss:
    def test_batch_norm_standardizes(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(16, 4)))
        out, mean, var = te.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), axis=-1)
        assert_allclose(out.data.mean(axis=0), np.zeros(4), atol=1e-10)
        assert_allclose(out.data.var(axis=0), np.ones(4), atol=1e-4)
        assert_allclose(mean, x.data.mean(axis=0))
        assert_allclose(var, x.data.var(axis=0))

    def test_cross_entropy_uniform_logits(self):
        loss = te.softmax_cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
        assert loss.item() == pytest.approx(np.log(3.0))

    def test_cross_entropy_stable_for_large_logits(self):
        loss = te.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_bad_labels(self):
        with pytest.raises(ShapeError):
            te.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))
        with pytest.raises(ValueError):
            te.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestGradCheck:
    @pytest.mark.parametrize("fn, shape", [
        (lambda t: te.reduce("sum", te.gelu(t) * t), (3, 4)),
        (lambda t: te.reduce("mean", te.softmax(t, 0) * te.softmax(t, 1)), (3, 4)),
        (lambda t: te.reduce("sum", te.matmul(t, te.transpose(t, (1, 0)))), (3, 2)),
    ])
    def test_smooth_functions(self, rng, fn, shape):
        x = Tensor(rng.uniform(-1, 1, size=shape))
        assert te.grad_check(fn, [x]) < 1e-5

    def test_kinks_are_skipped(self):
        x = Tensor([0.0, 1.0, -1.0])
        result = te.grad_check_detailed(lambda t: te.reduce("sum", te.relu(t)), [x])
        assert result.skipped == 1
        assert result.checked == 2
        assert result.max_error < 1e-8

    def test_central_difference_error_is_second_order(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=6))
        w = Tensor(rng.uniform(-1, 1, size=(6, 6)))

        def f(t):
            return te.reduce("sum", te.gelu(te.matmul(te.reshape(t, (1, 6)), w)))

        (analytic,) = grads_of(f, x)
        x.requires_grad = False
        coords = list(range(6))
        errors = []
        for h in (1e-2, 1e-3):
            numeric, _ = te.numerical_gradient(f, [x], x, coords, h)
            errors.append(np.max(np.abs(numeric - analytic)))
        assert errors[0] / errors[1] > 30

    def test_gradients_are_cleared(self, rng):
        x = Tensor(rng.normal(size=3))
        te.grad_check(lambda t: te.reduce("sum", t * t), [x])
        assert x.grad is None


class TestDebugMode:
    def test_non_finite_forward_raises(self):
        te.set_debug(True)
        try:
            with pytest.raises(ContractError, match="mul"):
                with np.errstate(over="ignore"):
                    te.mul(Tensor([1e200]), Tensor([1e200]))
        finally:
            te.set_debug(False)
        assert not te.debug_enabled()


class TestSerialization:
    def test_roundtrip(self, tmp_path, rng):
        t = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
        te.save_tensor(tmp_path / "t.bin", t)
        loaded = te.load_tensor(tmp_path / "t.bin")
        assert loaded.dtype == np.float32
        assert_array_equal(loaded.data, t.data)

    def test_offsets_chain(self):
        buf = te.tensor_to_bytes(np.ones(2)) + te.tensor_to_bytes(np.zeros((1, 3)))
        first, end = te.tensor_from_bytes(buf)
        second, end2 = te.tensor_from_bytes(buf, end)
        assert first.shape == (2,) and second.shape == (1, 3)
        assert end2 == len(buf)

    def test_corrupt_input(self):
        good = te.tensor_to_bytes(np.ones(4))
        with pytest.raises(FormatError):
            te.tensor_from_bytes(b"XXXX" + good[4:])
        with pytest.raises(FormatError):
            te.tensor_from_bytes(good[:-3])
        with pytest.raises(FormatError):
            te.tensor_to_bytes(np.ones(2, dtype=np.float16))
