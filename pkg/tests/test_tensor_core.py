"""Primitive ops and the tape."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surfuse import ops
from surfuse.gradcheck import check_function, check_primitives, primitive_cases
from surfuse.tensor import (
    ConfigError,
    NumericError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    get_default_dtype,
    make_rng,
    precision,
)


def leaf(a):
    return Tensor(a, requires_grad=True, dtype=np.float64)


class TestTensor:
    def test_default_dtype_is_32_bit(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_restores(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_grad_present_iff_requires_grad(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        assert a.grad.shape == a.shape
        assert Tensor(np.ones(3)).grad is None

    def test_item_needs_single_element(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_philox_rng_is_reproducible(self):
        a = make_rng(3).standard_normal(5)
        b = make_rng(np.random.SeedSequence(3)).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        assert isinstance(make_rng(3).bit_generator, np.random.Philox)


class TestLinear:
    def test_identity_map(self, f64):
        y = ops.linear(Tensor([[1.0, 1.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(y.data, [[1.0, 1.0]])

    def test_hand_product(self, f64):
        y = ops.linear(Tensor([[1.0, 1.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[3.0, 7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)|\(4, 5\).*\(2, 3\)"):
            ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(4)))

    def test_gradient(self, f64, rng):
        fn, inputs = primitive_cases()["linear"](rng)
        assert check_function(fn, inputs, rng) < 1e-4


def naive_xcorr(x, k, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


class TestConv2d:
    def test_identity_kernel(self, f64, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_output_size_formula(self):
        assert ops.conv_output_size(224, 3, 2, 1) == 112
        y = ops.conv2d(Tensor(np.zeros((1, 3, 224, 224))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, pad=1)
        assert y.shape == (1, 4, 112, 112)

    def test_matches_nested_loops(self, f64, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        k = rng.standard_normal((1, 1, 2, 2))
        y = ops.conv2d(Tensor(x), Tensor(k))
        np.testing.assert_allclose(y.data, naive_xcorr(x, k, 1, 0), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_strided_padded_against_loops(self, f64, rng, stride, pad):
        x = rng.standard_normal((2, 3, 7, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(y.data, naive_xcorr(x, k, stride, pad) + b[:, None, None], atol=1e-12)

    def test_channels_last_agrees(self, f64, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((5, 3, 3, 3))
        a = ops.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
        b = ops.conv2d(Tensor(x.transpose(0, 2, 3, 1)), Tensor(k), stride=2, pad=1, channels_last=True).data
        np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), atol=1e-12)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def mha_params(rng, d):
    ps = []
    for _ in range(4):
        ps += [rng.standard_normal((d, d)), rng.standard_normal(d)]
    return ps


def naive_mha(x, params, heads):
    wq, bq, wk, bk, wv, bv, wo, bo = params
    B, L, d = x.shape
    dh = d // heads
    out = np.zeros_like(x)
    for b in range(B):
        q = x[b] @ wq.T + bq
        k = x[b] @ wk.T + bk
        v = x[b] @ wv.T + bv
        ctx = np.zeros((L, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            w = np.exp(s - s.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            ctx[:, sl] = w @ v[:, sl]
        out[b] = ctx @ wo.T + bo
    return out


class TestAttention:
    def test_single_token_is_value_then_output_projection(self, f64, rng):
        x = rng.standard_normal((3, 1, 8))
        p = mha_params(rng, 8)
        y, attn = ops.multi_head_attention(Tensor(x), *map(Tensor, p), heads=2, return_weights=True)
        np.testing.assert_array_equal(attn.data, np.ones_like(attn.data))
        wv, bv, wo, bo = p[4], p[5], p[6], p[7]
        np.testing.assert_allclose(y.data, (x @ wv.T + bv) @ wo.T + bo, atol=1e-12)

    def test_weight_rows_sum_to_one(self, f64, rng):
        x = rng.standard_normal((2, 5, 8))
        _, attn = ops.multi_head_attention(Tensor(x), *map(Tensor, mha_params(rng, 8)), heads=4, return_weights=True)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_matches_per_head_loop(self, f64, rng):
        x = rng.standard_normal((2, 4, 8))
        p = [a / 3 for a in mha_params(rng, 8)]
        y = ops.multi_head_attention(Tensor(x), *map(Tensor, p), heads=2)
        np.testing.assert_allclose(y.data, naive_mha(x, p, 2), atol=1e-9)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigError):
            ops.multi_head_attention(Tensor(np.zeros((1, 1, 6))), *map(Tensor, mha_params(rng, 6)), heads=4)


class TestLayerNorm:
    def test_constant_row_gives_zero(self, f64):
        y = ops.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_constant_row_gives_beta(self, f64, rng):
        beta = rng.standard_normal(5)
        y = ops.layer_norm(Tensor(np.full((2, 5), -1.5)), Tensor(rng.standard_normal(5)), Tensor(beta))
        np.testing.assert_allclose(y.data, np.broadcast_to(beta, (2, 5)), atol=1e-15)

    def test_standardized_statistics(self, f64, rng):
        x = rng.standard_normal((6, 32)) * 4 + 2
        y = ops.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32)), eps=1e-12).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-7)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)


class TestSoftmax:
    def test_symmetric(self, f64):
        np.testing.assert_array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_log_ratios(self, f64):
        p = ops.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            ops.softmax(Tensor([0.0, np.nan]))
        with pytest.raises(NumericError):
            ops.softmax(Tensor([0.0, np.inf]))

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, st.integers(2, 9), elements=st.floats(-50, 50)),
        st.floats(-1e3, 1e3),
    )
    def test_rows_sum_to_one_and_shift_invariance(self, x, c):
        with precision(np.float64):
            p = ops.softmax(Tensor(x)).data
            q = ops.softmax(Tensor(x + c)).data
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p, q, atol=1e-9)
        # logits closer than float resolution give tied probabilities
        assert x[np.argmax(p)] >= x.max() - 1e-12


class TestCrossEntropy:
    def test_uniform_logits(self, f64):
        loss = ops.cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)
        assert loss.item() == pytest.approx(1.609438, abs=1e-6)

    def test_saturated_margin(self, f64):
        z = np.zeros((1, 3))
        z[0, 2] = 100.0
        assert ops.cross_entropy(Tensor(z), np.array([2])).item() < 1e-9

    def test_matches_naive_formula(self, f64, rng):
        z = rng.standard_normal((8, 5)) * 3
        t = rng.integers(0, 5, 8)
        naive = np.mean([-math.log(math.exp(z[i, t[i]]) / np.exp(z[i]).sum()) for i in range(8)])
        assert ops.cross_entropy(Tensor(z), t).item() == pytest.approx(naive, abs=1e-9)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(IndexError):
            ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.integers(0, 3))
    def test_non_negative(self, z, t):
        with precision(np.float64):
            assert ops.cross_entropy(Tensor(z), np.full(3, t)).item() >= 0.0


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_dropout_eval_identity(self, rng):
        x = Tensor(rng.standard_normal(10))
        np.testing.assert_array_equal(ops.dropout(x, 0.1, training=False).data, x.data)

    def test_dropout_rejects_p_one(self):
        with pytest.raises(ConfigError):
            ops.dropout(Tensor([1.0]), 1.0, training=True, rng=make_rng(0))

    def test_dropout_expectation(self, f64):
        x = Tensor(np.full(100_000, 1.0))
        y = ops.dropout(x, 0.5, training=True, rng=make_rng(11)).data
        assert abs(y.mean() - 1.0) < 0.02
        assert set(np.unique(y)) <= {0.0, 2.0}

    def test_add_and_scale(self, f64):
        np.testing.assert_array_equal(ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
        np.testing.assert_array_equal(ops.scale(Tensor([1.0, -2.0]), 0.5).data, [0.5, -1.0])


class TestBackward:
    def test_sum_gives_ones(self, f64, rng):
        x = leaf(rng.standard_normal((2, 3, 4)))
        with Tape() as tape:
            loss = ops.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_dot_product(self, f64, rng):
        x, y = leaf(rng.standard_normal(5)), leaf(rng.standard_normal(5))
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, y))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, y.data)
        np.testing.assert_array_equal(y.grad, x.data)

    def test_gradients_accumulate(self, f64):
        x = leaf([1.0, 2.0])
        for _ in range(2):
            with Tape() as tape:
                loss = ops.sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_loss_not_on_tape(self, f64):
        x = leaf([1.0])
        with Tape():
            loss = ops.sum(x)
        with pytest.raises(TapeError):
            Tape().backward(loss)

    def test_non_scalar_loss(self, f64):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = ops.scale(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_no_active_tape(self, f64):
        with pytest.raises(TapeError):
            backward(Tensor([1.0]))

    def test_nodes_in_topological_order(self, f64, rng):
        x = leaf(rng.standard_normal((2, 3)))
        w = leaf(rng.standard_normal((4, 3)))
        with Tape() as tape:
            loss = ops.mean(ops.relu(ops.linear(x, w)))
        seen = {id(x), id(w)}
        for node in tape.nodes:
            for inp in node.inputs:
                assert id(inp) in seen or not inp.requires_grad
            seen.add(id(node.output))

    def test_skip_frozen_records_nothing_upstream(self, f64, rng):
        w = Parameter(rng.standard_normal((3, 3)), name="w")
        w.trainable = False
        x = Tensor(rng.standard_normal((2, 3)))
        with Tape(skip_frozen=True) as tape:
            y = ops.linear(x, w)
        assert len(tape) == 0 and not tape.tracks(y)

    def test_determinism(self, f64, rng):
        fn, inputs = primitive_cases()["multi_head_attention"](rng)

        def grads():
            leaves = [leaf(a) for a in inputs]
            with Tape() as tape:
                loss = ops.sum(fn(*leaves))
            tape.backward(loss)
            return loss.data.copy(), [l.grad.copy() for l in leaves]

        (la, ga), (lb, gb) = grads(), grads()
        assert la.tobytes() == lb.tobytes()
        for a, b in zip(ga, gb):
            assert a.tobytes() == b.tobytes()


class TestGradientSuite:
    def test_every_primitive_within_tolerance(self):
        results = check_primitives(trials=10, seed=0)
        assert len(results) == len(primitive_cases())
        for r in results:
            assert r.passed, f"{r.name}: {r.max_rel_error:.3e}"
