import math

import numpy as np
import pytest

from lvid import tensor_kernel as tk
from lvid.tensor_kernel import Tensor


def matmul_oracle(a, b):
    # Naive triple loop, independent of numpy's matmul path.
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def attention_oracle(q, k, v):
    # Straight-line per-element evaluation with python floats.
    lq, d = q.shape
    lk = k.shape[0]
    out = np.zeros((lq, v.shape[1]))
    for i in range(lq):
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d)
                  for j in range(lk)]
        mx = max(scores)
        exps = [math.exp(s - mx) for s in scores]
        z = sum(exps)
        probs = [e / z for e in exps]
        for c in range(v.shape[1]):
            out[i, c] = sum(probs[j] * v[j, c] for j in range(lk))
    return out


class TestMatmul:
    def test_identity(self):
        b = Tensor(np.arange(9.0).reshape(3, 3))
        out = tk.matmul(Tensor(np.eye(3)), b)
        assert np.array_equal(out.data, b.data)

    def test_direct_substitution(self):
        out = tk.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        out = tk.matmul(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - matmul_oracle(a, b))) <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tk.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tk.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform_on_zero(self):
        out = tk.softmax(Tensor(np.zeros(4)), axis=0)
        assert np.array_equal(out.data, np.full(4, 0.25))

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(6)
        for c in (-3.0, 0.17, 100.0):
            a = tk.softmax(Tensor(x), axis=0).data
            b = tk.softmax(Tensor(x + c), axis=0).data
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_direct_evaluation(self):
        out = tk.softmax(Tensor([1.0, 2.0, 3.0]), axis=0)
        exps = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        z = sum(exps)
        expected = np.array([e / z for e in exps])
        assert np.max(np.abs(out.data - expected)) <= 1e-15
        assert np.allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)

    def test_rows_sum_to_one_and_open_interval(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((40, 9)) * 3
        out = tk.softmax(Tensor(x), axis=1).data
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_bad_axis(self):
        with pytest.raises(tk.ShapeError):
            tk.softmax(Tensor(np.zeros((2, 2))), axis=2)


class TestLayerNorm:
    def _gb(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_row_is_zeros(self):
        g, b = self._gb(5)
        out = tk.layer_norm(Tensor(np.full((2, 5), 3.7)), g, b)
        assert np.array_equal(out.data, np.zeros((2, 5)))

    def test_two_point_row(self):
        g, b = self._gb(2)
        out = tk.layer_norm(Tensor([[1.0, 3.0]]), g, b)
        # population variance 1, eps=1e-5 inside the sqrt
        expected = np.array([[-1.0, 1.0]]) / math.sqrt(1.0 + 1e-5)
        assert np.max(np.abs(out.data - expected)) <= 1e-12
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_row_statistics_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 8)) * 4 + 1
        g, b = self._gb(8)
        out = tk.layer_norm(Tensor(x), g, b).data
        for r in range(3):
            row = x[r]
            mu = sum(row) / 8
            var = sum((v - mu) ** 2 for v in row) / 8
            expect = (row - mu) / math.sqrt(var + 1e-5)
            assert np.max(np.abs(out[r] - expect)) <= 1e-12
        assert np.max(np.abs(out.mean(axis=1))) <= 1e-10
        assert np.max(np.abs(out.var(axis=1) - 1.0)) <= 1e-4

    def test_gain_bias_applied(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 6))
        g = Tensor(rng.standard_normal(6))
        b = Tensor(rng.standard_normal(6))
        base = tk.layer_norm(Tensor(x), *self._gb(6)).data
        out = tk.layer_norm(Tensor(x), g, b).data
        assert np.max(np.abs(out - (base * g.data + b.data))) <= 1e-12

    def test_degenerate_row_error(self):
        with pytest.raises(tk.ShapeError, match="degenerate"):
            tk.layer_norm(Tensor(np.zeros((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestAttention:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.standard_normal((4, 3)))
        k = Tensor(rng.standard_normal((1, 3)))
        v = Tensor(rng.standard_normal((1, 5)))
        out = tk.scaled_dot_attention(q, k, v)
        assert np.array_equal(out.data, np.repeat(v.data, 4, axis=0))

    def test_causal_blocks_later_frames(self):
        rng = np.random.default_rng(1)
        frames = np.array([0, 0, 1, 2])
        q = Tensor(rng.standard_normal((4, 4)))
        k = rng.standard_normal((4, 4))
        v = rng.standard_normal((4, 4))
        mask = tk.causal_by_frame(frames)
        base = tk.scaled_dot_attention(q, Tensor(k), Tensor(v), mask).data
        k2, v2 = k.copy(), v.copy()
        k2[2:] = rng.standard_normal((2, 4)) * 9
        v2[2:] = rng.standard_normal((2, 4)) * 9
        pert = tk.scaled_dot_attention(q, Tensor(k2), Tensor(v2), mask).data
        assert np.array_equal(base[:2], pert[:2])

    def test_unmasked_against_oracle(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((3, 4))
        k = rng.standard_normal((3, 4))
        v = rng.standard_normal((3, 2))
        out = tk.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.max(np.abs(out - attention_oracle(q, k, v))) <= 1e-12

    def test_all_blocked_row_raises(self):
        # A shared frame map never blocks the diagonal, so force an all-blocked
        # row through the mask internals to exercise the NaN guard.
        q = Tensor(np.zeros((2, 2)))
        kv = Tensor(np.ones((2, 2)))
        mask = tk.causal_by_frame(np.array([0, 1]))
        mask._blocked = np.array([[True, True], [False, False]])
        with pytest.raises(tk.AllBlockedError):
            tk.scaled_dot_attention(q, kv, kv, mask)


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 8))
        out = tk.rope_apply(Tensor(x), np.zeros(3, dtype=int))
        assert np.array_equal(out.data, x)

    def test_pair_norms_preserved(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 6))
        out = tk.rope_apply(Tensor(x), np.array([0, 1, 7, 31, 900])).data
        before = (x.reshape(5, 3, 2) ** 2).sum(axis=2)
        after = (out.reshape(5, 3, 2) ** 2).sum(axis=2)
        assert np.max(np.abs(before - after)) <= 1e-12

    def test_closed_form_d2(self):
        out = tk.rope_apply(Tensor([[1.0, 0.0]]), np.array([1])).data
        assert np.max(np.abs(out - [[math.cos(1.0), math.sin(1.0)]])) <= 1e-15
        assert np.allclose(out, [[0.5403023, 0.8414710]], atol=1e-7)

    def test_odd_channel_count_rejected(self):
        with pytest.raises(tk.ShapeError, match="even"):
            tk.rope_apply(Tensor(np.zeros((2, 3))), np.array([0, 1]))

    def test_negative_position_rejected(self):
        with pytest.raises(tk.ShapeError):
            tk.rope_apply(Tensor(np.zeros((1, 2))), np.array([-1]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        tape = tk.Tape()
        with tape:
            loss = tk.sum_all(x)
        tk.backward(tape, loss)
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_quadratic(self):
        x = Tensor([3.0], requires_grad=True)
        tape = tk.Tape()
        with tape:
            loss = tk.sum_all(tk.mul(x, x))
        tk.backward(tape, loss)
        assert np.allclose(x.grad, [6.0], atol=1e-12)

    def test_accumulation_until_zeroed(self):
        x = Tensor([2.0], requires_grad=True)
        for expected in (4.0, 8.0):
            tape = tk.Tape()
            with tape:
                loss = tk.sum_all(tk.mul(x, x))
            tk.backward(tape, loss)
            assert np.allclose(x.grad, [expected])
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = tk.Tape()
        with tape:
            y = tk.mul(x, x)
        with pytest.raises(tk.ShapeError, match="scalar"):
            tk.backward(tape, y)

    def test_loss_off_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        tape = tk.Tape()
        with tape:
            tk.mul(x, x)
        stray = Tensor([[1.0]])
        with pytest.raises(ValueError, match="tape"):
            tk.backward(tape, tk.sum_all(stray))

    def test_fan_out_accumulates(self):
        x = Tensor([1.5], requires_grad=True)
        tape = tk.Tape()
        with tape:
            y = tk.mul(x, x)
            loss = tk.sum_all(tk.add(y, y))
        tk.backward(tape, loss)
        assert np.allclose(x.grad, [6.0], atol=1e-12)


class TestTapeReplay:
    def test_replay_reproduces_outputs(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        tape = tk.Tape()
        with tape:
            h = tk.matmul(a, b)
            h = tk.gelu(h)
            h = tk.softmax(h, axis=1)
            tk.mean_all(h)
        assert len(tape.nodes) == 4
        assert tape.replay()


class TestGradCheck:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        err = tk.grad_check(lambda ps: tk.sum_all(tk.mul(ps[0], ps[0])), [x])
        assert err <= 1e-8

    def test_softmax_component(self):
        x = Tensor([0.1, -0.2, 0.3], requires_grad=True)

        def fn(ps):
            s = tk.softmax(ps[0], axis=0)
            return tk.sum_all(tk.slice_rows(tk.reshape(s, (3, 1)), 0, 1))

        assert tk.grad_check(fn, [x]) <= 1e-6

    def test_constant_function(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([[5.0]])
        err = tk.grad_check(lambda ps: tk.sum_all(c), [x])
        assert err == 0.0

    def test_nondeterministic_function_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        state = {"n": 0.0}

        def fn(ps):
            state["n"] += 1.0
            return tk.sum_all(tk.scale(ps[0], state["n"]))

        with pytest.raises(tk.DeterminismError):
            tk.grad_check(fn, [x])

    def test_eps_range_enforced(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            tk.grad_check(lambda ps: tk.sum_all(ps[0]), [x], eps=1e-2)

    @pytest.mark.parametrize("op", ["layer_norm", "attention", "rope", "linear",
                                    "mul_rows", "log_clamped", "gelu"])
    def test_each_primitive(self, op):
        rng = np.random.default_rng(hash(op) % 2 ** 31)

        if op == "layer_norm":
            x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
            g = Tensor(rng.standard_normal(5), requires_grad=True)
            b = Tensor(rng.standard_normal(5), requires_grad=True)
            fn = lambda ps: tk.mean_all(tk.mul(
                tk.layer_norm(ps[0], ps[1], ps[2]),
                tk.layer_norm(ps[0], ps[1], ps[2])))
            params = [x, g, b]
        elif op == "attention":
            q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            k = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            v = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
            mask = tk.causal_by_frame(np.array([0, 1, 2]))
            fn = lambda ps: tk.mean_all(tk.mul(
                tk.scaled_dot_attention(ps[0], ps[1], ps[2], mask),
                tk.scaled_dot_attention(ps[0], ps[1], ps[2], mask)))
            params = [q, k, v]
        elif op == "rope":
            x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
            pos = np.array([0, 1, 2, 5])
            fn = lambda ps: tk.mean_all(tk.mul(tk.rope_apply(ps[0], pos),
                                               tk.rope_apply(ps[0], pos)))
            params = [x]
        elif op == "linear":
            x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            b = Tensor(rng.standard_normal(2), requires_grad=True)
            fn = lambda ps: tk.mean_all(tk.mul(tk.linear(*ps), tk.linear(*ps)))
            params = [x, w, b]
        elif op == "mul_rows":
            x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
            s = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
            fn = lambda ps: tk.mean_all(tk.mul(tk.mul_rows(*ps), tk.mul_rows(*ps)))
            params = [x, s]
        elif op == "log_clamped":
            x = Tensor(np.abs(rng.standard_normal(5)) + 0.5, requires_grad=True)
            fn = lambda ps: tk.mean_all(tk.log_clamped(ps[0]))
            params = [x]
        else:  # gelu
            x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            fn = lambda ps: tk.mean_all(tk.gelu(ps[0]))
            params = [x]

        assert tk.grad_check(fn, params) <= 1e-6


class TestInvariants:
    def test_determinism_bitwise(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.standard_normal((6, 6)))
        b = Tensor(rng.standard_normal((6, 6)))

        def run():
            h = tk.matmul(a, b)
            h = tk.softmax(h, axis=1)
            h = tk.layer_norm(h, Tensor(np.ones(6)), Tensor(np.zeros(6)))
            return tk.gelu(h).data.tobytes()

        assert run() == run()

    def test_nonfinite_rejected_on_construction(self):
        with pytest.raises(tk.NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(tk.NonFiniteError):
            Tensor([np.inf])

    def test_nonfinite_scale_rejected(self):
        with pytest.raises(tk.NonFiniteError):
            tk.scale(Tensor([1.0]), float("inf"))

    def test_grad_shape_matches_data(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        tape = tk.Tape()
        with tape:
            loss = tk.mean_all(tk.mul(x, x))
        tk.backward(tape, loss)
        assert x.grad.shape == x.data.shape

    def test_nested_tapes_record_innermost(self):
        x = Tensor([1.0], requires_grad=True)
        outer = tk.Tape()
        inner = tk.Tape()
        with outer:
            tk.mul(x, x)
            with inner:
                tk.mul(x, x)
        assert len(outer.nodes) == 1
        assert len(inner.nodes) == 1
