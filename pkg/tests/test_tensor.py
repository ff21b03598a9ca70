"""Core tensor ops, tape backward, Adam, and the finite-difference harness."""
import numpy as np
import pytest

from semmatch.gradcheck import finite_diff_check
from semmatch.optim import AdamState, adam_step
from semmatch.tensor import (GraphError, ShapeError, Tape, Tensor, add,
                             backward, clamp, concat_channels, conv2d, div,
                             elu_plus_one, l2_normalize_rows, linear, log,
                             matmul, mean_all, mul, relu, reshape,
                             scaled_dot_attention, softmax, sub, sum_all,
                             sum_axis, take_flat, take_rows, transpose2d)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, -2.0], [0.5, 3.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_allclose(out.data, a, rtol=1e-6)

    def test_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_allclose(out.data, [[17.0], [39.0]], rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        err = finite_diff_check(lambda x, y: sum_all(matmul(x, y)), [a, b])
        assert err < 1e-4


class TestSoftmax:
    def test_uniform_on_zeros(self):
        out = softmax(Tensor(np.zeros(4)), axis=0)
        np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-7)

    def test_stabilized_against_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.normal(scale=10.0, size=(3, 6))
            out = softmax(Tensor(x), axis=1)
            np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_masked_slice_is_zero(self):
        mask = np.array([[True, False], [False, False]])
        out = softmax(Tensor(np.ones((2, 2))), axis=1, mask=mask)
        np.testing.assert_allclose(out.data, [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=6)
        w = rng.normal(size=6)  # weighted readout exercises off-diagonal terms
        err = finite_diff_check(
            lambda t: sum_all(mul(softmax(t, axis=0), Tensor(w))), [x])
        assert err < 1e-6


class TestScaledDotAttention:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(4, 8))
        k = rng.normal(size=(1, 8))
        v = rng.normal(size=(1, 8))
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, np.repeat(v, 4, axis=0),
                                   rtol=1e-6)

    def test_orthonormal_keys_hand_oracle(self):
        scale = 40.0
        k = np.eye(3) * scale
        v = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
        q = k[1:2]
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
        scores = (q @ k.T) / np.sqrt(3.0)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        np.testing.assert_allclose(out.data, w @ v, rtol=1e-6)
        np.testing.assert_allclose(out.data, v[1:2], atol=1e-4)

    def test_joint_kv_permutation_invariance(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(5, 6))
        k = rng.normal(size=(7, 6))
        v = rng.normal(size=(7, 6))
        perm = rng.permutation(7)
        a = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
        b = scaled_dot_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]))
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)


class TestConcatChannels:
    def test_empty_operand(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = concat_channels(Tensor(np.zeros((2, 0))), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_case(self):
        out = concat_channels(Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 3.0], [2.0, 4.0]])

    def test_leading_dim_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))

    def test_gradient_splits_to_ones(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2)))
        b = tape.leaf(np.ones((2, 3)))
        grads = backward(tape, sum_all(concat_channels(a, b)))
        np.testing.assert_array_equal(grads[a], np.ones((2, 2)))
        np.testing.assert_array_equal(grads[b], np.ones((2, 3)))


class TestLinear:
    def test_identity_weight(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = linear(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_zero_weight_gives_bias_rows(self):
        b = np.array([0.5, -1.5, 2.0])
        out = linear(Tensor(np.ones((4, 2))), Tensor(np.zeros((2, 3))),
                     Tensor(b))
        np.testing.assert_allclose(out.data, np.tile(b, (4, 1)), rtol=1e-6)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=2)
        err = finite_diff_check(
            lambda xx, ww, bb: sum_all(linear(xx, ww, bb)), [x, w, b])
        assert err < 1e-8


class TestBackward:
    def test_sum_gives_ones(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0, 3.0]))
        grads = backward(tape, sum_all(x))
        np.testing.assert_array_equal(grads[x], np.ones(3))

    def test_quadratic_gives_two_x(self):
        tape = Tape()
        xv = np.array([1.0, -2.0, 0.5])
        x = tape.leaf(xv)
        grads = backward(tape, sum_all(mul(x, x)))
        np.testing.assert_allclose(grads[x], 2 * xv, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(GraphError):
            backward(tape, x)

    def test_composed_graph_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        q = rng.normal(size=(3, 4))
        k = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=2)

        def net(qq, kk, vv, ww, bb):
            att = scaled_dot_attention(qq, kk, vv)
            proj = linear(att, ww, bb)
            return sum_all(softmax(proj, axis=1))

        err = finite_diff_check(net, [q, k, v, w, b])
        assert err < 1e-4

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(7)
        xv = rng.normal(size=(4, 4)).astype(np.float32)
        wv = rng.normal(size=(4, 4)).astype(np.float32)

        def run():
            tape = Tape()
            x = tape.leaf(xv.copy())
            w = tape.leaf(wv.copy())
            loss = sum_all(softmax(matmul(x, w), axis=1))
            g = backward(tape, loss)
            return g[x].copy(), g[w].copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestElementwiseGradients:
    """Finite-difference checks for the remaining primitive ops."""

    @pytest.mark.parametrize("name,fn,make", [
        ("add", lambda a, b: sum_all(add(a, b)),
         lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        ("add_broadcast", lambda a, b: sum_all(mul(add(a, b), add(a, b))),
         lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        ("sub", lambda a, b: sum_all(mul(sub(a, b), sub(a, b))),
         lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        ("mul", lambda a, b: sum_all(mul(a, b)),
         lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        ("div", lambda a, b: sum_all(div(a, b)),
         lambda rng: [rng.normal(size=(3, 4)),
                      rng.uniform(0.5, 2.0, size=(3, 1))]),
        ("relu", lambda a: sum_all(mul(relu(a), a)),
         lambda rng: [rng.normal(size=(3, 4)) + 0.05]),
        ("elu_plus_one", lambda a: sum_all(mul(elu_plus_one(a), a)),
         lambda rng: [rng.normal(size=(3, 4))]),
        ("log", lambda a: sum_all(log(a)),
         lambda rng: [rng.uniform(0.1, 3.0, size=(3, 4))]),
        ("clamp", lambda a: sum_all(mul(clamp(a, -0.5, 0.5), a)),
         lambda rng: [rng.normal(size=(3, 4))]),
        ("l2norm", lambda a: sum_all(mul(l2_normalize_rows(a), a)),
         lambda rng: [rng.normal(size=(4, 5)) + 0.3]),
        ("sum_axis", lambda a: sum_all(mul(sum_axis(a, 0), sum_axis(a, 0))),
         lambda rng: [rng.normal(size=(3, 4))]),
        ("mean", lambda a: mean_all(mul(a, a)),
         lambda rng: [rng.normal(size=(3, 4))]),
        ("transpose", lambda a: sum_all(mul(transpose2d(a), transpose2d(a))),
         lambda rng: [rng.normal(size=(3, 4))]),
        ("reshape", lambda a: sum_all(mul(reshape(a, (2, 6)),
                                          reshape(a, (2, 6)))),
         lambda rng: [rng.normal(size=(3, 4))]),
    ])
    def test_gradient(self, name, fn, make):
        rng = np.random.default_rng(hash(name) % 2**32)
        err = finite_diff_check(fn, make(rng))
        assert err < 1e-6, f"{name}: {err}"

    def test_take_rows_scatter(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(5, 3))
        idx = np.array([0, 2, 2, 4])
        err = finite_diff_check(
            lambda a: sum_all(mul(take_rows(a, idx), take_rows(a, idx))), [x])
        assert err < 1e-6

    def test_take_flat_scatter(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 4))
        idx = np.array([0, 5, 5, 15])
        err = finite_diff_check(
            lambda a: sum_all(mul(take_flat(a, idx), take_flat(a, idx))), [x])
        assert err < 1e-6

    def test_conv2d_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        err = finite_diff_check(
            lambda xx, ww, bb: sum_all(conv2d(xx, ww, bb, stride=2, pad=1)),
            [x, w, b])
        assert err < 1e-6

    def test_conv2d_matches_direct_computation(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 5, 1)).astype(np.float32)
        w = rng.normal(size=(3, 3, 1, 1)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), None, stride=1, pad=1).data
        xp = np.pad(x[:, :, 0], 1)
        expect = np.zeros((5, 5))
        for r in range(5):
            for c in range(5):
                expect[r, c] = (xp[r:r + 3, c:c + 3] * w[:, :, 0, 0]).sum()
        np.testing.assert_allclose(out[:, :, 0], expect, rtol=1e-5, atol=1e-5)


class TestNonFiniteGuard:
    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.array([1.0, np.nan]))

    def test_inf_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.array([np.inf]))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.ones((2, 2), dtype=np.float32)}
        state = AdamState.for_params(p)
        adam_step(p, {"w": np.zeros((2, 2), dtype=np.float32)}, state)
        np.testing.assert_array_equal(p["w"], np.ones((2, 2)))

    def test_constant_gradient_moves_against_sign(self):
        p = {"w": np.zeros(3, dtype=np.float32)}
        state = AdamState.for_params(p)
        g = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        for _ in range(50):
            adam_step(p, {"w": g.copy()}, state, lr=0.01)
        assert np.all(np.sign(p["w"]) == -np.sign(g))

    def test_first_step_magnitude_is_lr(self):
        p = {"w": np.zeros(4, dtype=np.float32)}
        state = AdamState.for_params(p)
        g = np.array([0.5, -3.0, 10.0, -0.01], dtype=np.float32)
        adam_step(p, {"w": g.copy()}, state, lr=1e-3)
        # bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
        np.testing.assert_allclose(np.abs(p["w"]), 1e-3, rtol=1e-3)

    def test_step_counter_increases(self):
        p = {"w": np.zeros(1, dtype=np.float32)}
        state = AdamState.for_params(p)
        for i in range(3):
            adam_step(p, {"w": np.ones(1, dtype=np.float32)}, state)
            assert state.step == i + 1


class TestFiniteDiffHarness:
    def test_linear_layer_error_tiny(self):
        rng = np.random.default_rng(12)
        err = finite_diff_check(
            lambda x, w: sum_all(matmul(x, w)),
            [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))])
        assert err < 1e-8

    def test_softmax_error_small(self):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(2, 5))
        err = finite_diff_check(
            lambda x: sum_all(mul(softmax(x, axis=1), Tensor(w))),
            [rng.normal(size=(2, 5))])
        assert err < 1e-6
