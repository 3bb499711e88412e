"""Tensor, tape, and operator tests: forward examples, brute-force oracles,
finite-difference gradient checks, and the engine invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiomotion import autodiff as ad
from cardiomotion.autodiff import AdamState, NonFiniteError, Prng, Tape, Tensor

from conftest import t64


def conv2d_loop_oracle(x, w, bias=None, stride=1, padding=1):
    """Direct nested-loop convolution, independent of the im2col path."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, ic, yy * stride + i, xx * stride + j] * w[oc, ic, i, j]
                    out[b, oc, yy, xx] = acc + (bias[oc] if bias is not None else 0.0)
    return out


class TestConv2d:
    def test_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == 9.0

    def test_identity_kernel(self, prng):
        x = Tensor(prng.normal((2, 3, 5, 5), 1.0, dtype=np.float64))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ad.conv2d(x, Tensor(w))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self, prng):
        x = prng.normal((1, 2, 5, 5), 1.0, dtype=np.float64)
        w = prng.normal((3, 2, 3, 3), 0.5, dtype=np.float64)
        b = prng.normal((3,), 0.3, dtype=np.float64)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
        want = conv2d_loop_oracle(x, w, b, stride=1, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_strided_matches_loop_oracle(self, prng):
        x = prng.normal((2, 3, 7, 7), 1.0, dtype=np.float64)
        w = prng.normal((4, 3, 3, 3), 0.5, dtype=np.float64)
        got = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        np.testing.assert_allclose(got, conv2d_loop_oracle(x, w, None, 2, 1), atol=1e-6)

    def test_non_exact_size_is_error(self, prng):
        x = Tensor(prng.normal((1, 1, 6, 6), 1.0, dtype=np.float64))
        w = Tensor(prng.normal((1, 1, 3, 3), 1.0, dtype=np.float64))
        with pytest.raises(ValueError, match="non-exact"):
            ad.conv2d(x, w, stride=2, padding=1)

    def test_shape_mismatch(self, prng):
        x = Tensor(prng.normal((1, 2, 5, 5), 1.0, dtype=np.float64))
        w = Tensor(prng.normal((1, 3, 3, 3), 1.0, dtype=np.float64))
        with pytest.raises(ValueError, match="channel"):
            ad.conv2d(x, w)

    def test_even_kernel_rejected(self, prng):
        x = Tensor(prng.normal((1, 1, 6, 6), 1.0, dtype=np.float64))
        w = Tensor(prng.normal((1, 1, 2, 2), 1.0, dtype=np.float64))
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d(x, w)

    def test_gradients(self, prng):
        x = t64(prng, (1, 2, 5, 5))
        w = t64(prng, (3, 2, 3, 3), 0.5)
        b = t64(prng, (3,), 0.2)
        err = ad.grad_check(lambda x, w, b: ad.conv2d(x, w, b, 1, 1), [x, w, b])
        assert err <= 1e-6


class TestUpsample:
    def test_factor_one_identity(self, prng):
        x = Tensor(prng.normal((1, 2, 3, 3), 1.0, dtype=np.float64))
        np.testing.assert_array_equal(ad.upsample_bilinear(x, 1).data, x.data)

    def test_hand_bilinear_row(self):
        # align-corners: out j samples input at j*(W-1)/(W*f-1)
        x = Tensor(np.array([[[[0.0, 1.0]]]]))
        out = ad.upsample_bilinear(x, 2)
        np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 1 / 3, 2 / 3, 1.0], atol=1e-12)

    def test_constant_preserved(self, prng):
        x = Tensor(np.full((1, 3, 4, 5), 0.7))
        out = ad.upsample_bilinear(x, 3)
        assert out.shape == (1, 3, 12, 15)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_factor_below_one_rejected(self, prng):
        with pytest.raises(ValueError):
            ad.upsample_bilinear(Tensor(np.zeros((1, 1, 2, 2))), 0)

    def test_gradients(self, prng):
        x = t64(prng, (1, 2, 4, 4))
        assert ad.grad_check(lambda x: ad.upsample_bilinear(x, 2), [x]) <= 1e-6


class TestConcat:
    def test_single_tensor(self, prng):
        x = Tensor(prng.normal((2, 3, 4, 4), 1.0, dtype=np.float64))
        np.testing.assert_array_equal(ad.concat([x], 1).data, x.data)

    def test_channel_shapes(self, prng):
        a = Tensor(prng.normal((1, 2, 4, 4), 1.0, dtype=np.float64))
        b = Tensor(prng.normal((1, 3, 4, 4), 1.0, dtype=np.float64))
        assert ad.concat([a, b], 1).shape == (1, 5, 4, 4)

    def test_incompatible_shapes(self, prng):
        a = Tensor(prng.normal((1, 2, 4, 4), 1.0, dtype=np.float64))
        b = Tensor(prng.normal((1, 3, 5, 4), 1.0, dtype=np.float64))
        with pytest.raises(ValueError):
            ad.concat([a, b], 1)

    def test_backward_splits_gradient(self, prng):
        a = t64(prng, (1, 2, 3, 3))
        b = t64(prng, (1, 4, 3, 3))
        with Tape():
            ad.backward(ad.reduce_sum(ad.concat([a, b], 1)))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_gradients(self, prng):
        a, b = t64(prng, (1, 2, 3, 3)), t64(prng, (1, 3, 3, 3))
        assert ad.grad_check(lambda a, b: ad.concat([a, b], 1), [a, b]) <= 1e-6


class TestPointwise:
    def test_tanh_zero(self):
        assert ad.tanh(Tensor(np.zeros(3))).data.max() == 0.0

    def test_sqrt_of_epsilon(self):
        assert ad.sqrt(Tensor(np.float64(0.01))).item() == 0.1

    def test_sqrt_negative_rejected(self):
        with pytest.raises(ValueError):
            ad.sqrt(Tensor(np.array([-1.0])))

    def test_shape_mismatch(self, prng):
        a = Tensor(prng.normal((3,), 1.0, dtype=np.float64))
        b = Tensor(prng.normal((4,), 1.0, dtype=np.float64))
        with pytest.raises(ValueError):
            ad.add(a, b)

    def test_scalar_broadcast(self, prng):
        x = Tensor(prng.normal((2, 3), 1.0, dtype=np.float64))
        np.testing.assert_allclose(ad.add(x, 2.0).data, x.data + 2.0)
        np.testing.assert_allclose(ad.mul(x, Tensor(np.float64(3.0))).data, x.data * 3.0)

    def test_dispatcher(self, prng):
        x = Tensor(prng.normal((4,), 1.0, dtype=np.float64))
        np.testing.assert_array_equal(ad.pointwise("square", x).data, x.data * x.data)
        with pytest.raises(ValueError):
            ad.pointwise("nope", x)

    def test_tanh_gradient_central_difference(self):
        x = Tensor(np.array(0.3), requires_grad=True)
        err = ad.grad_check(ad.tanh, [x])
        assert err <= 1e-5

    @pytest.mark.parametrize("kind,builder", [
        ("add", lambda p: (t64(p, (5,)), t64(p, (5,)))),
        ("sub", lambda p: (t64(p, (5,)), t64(p, (5,)))),
        ("mul", lambda p: (t64(p, (5,)), t64(p, (5,)))),
        ("square", lambda p: (t64(p, (5,)),)),
        ("tanh", lambda p: (t64(p, (5,)),)),
        ("relu", lambda p: (t64(p, (7,)),)),
    ])
    def test_gradients(self, prng, kind, builder):
        inputs = list(builder(prng))
        assert ad.grad_check(lambda *xs: ad.pointwise(kind, *xs), inputs) <= 1e-5

    def test_sqrt_log_scale_gradients(self, prng):
        x = t64(prng, (6,), 0.5)
        assert ad.grad_check(lambda x: ad.sqrt(ad.add(ad.square(x), 0.01)), [x]) <= 1e-5
        assert ad.grad_check(lambda x: ad.log(ad.add(ad.square(x), 0.1)), [x]) <= 1e-5
        assert ad.grad_check(lambda x: ad.scale(x, -2.5), [x]) <= 1e-5


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = ad.softmax(Tensor(np.zeros((4,))), 0)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-12)

    def test_shift_invariance(self, prng):
        x = prng.normal((2, 4, 3), 1.0, dtype=np.float64)
        a = ad.softmax(Tensor(x), 1).data
        b = ad.softmax(Tensor(x + 7.3), 1).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_matches_direct_formula(self, prng):
        x = prng.normal((5, 4), 2.0, dtype=np.float64)
        got = ad.softmax(Tensor(x), 1).data
        e = np.exp(x)
        np.testing.assert_allclose(got, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_sums_to_one(self, logits):
        out = ad.softmax(Tensor(np.asarray(logits)), 0)
        assert abs(out.data.sum() - 1.0) <= 1e-6
        assert np.all(out.data > 0) and np.all(out.data < 1.0 + 1e-12)

    def test_gradients(self, prng):
        x = t64(prng, (2, 4, 3))
        assert ad.grad_check(lambda x: ad.softmax(x, 1), [x]) <= 1e-5


class TestReduce:
    def test_mean(self):
        assert ad.reduce(Tensor(np.array([1.0, 2.0, 3.0])), "mean").item() == 2.0

    def test_sum_of_zeros(self):
        assert ad.reduce(Tensor(np.zeros((3, 4))), "sum").item() == 0.0

    def test_gradient_of_mean_is_inverse_count(self, prng):
        x = t64(prng, (2, 3, 4))
        with Tape():
            ad.backward(ad.reduce_mean(x))
        np.testing.assert_allclose(x.grad, 1.0 / x.size, atol=1e-15)

    def test_empty_reduction_rejected(self):
        with pytest.raises(ValueError):
            ad.reduce(Tensor(np.zeros((0, 3))), "mean")

    def test_axis_subset_gradcheck(self, prng):
        x = t64(prng, (2, 3, 4))
        assert ad.grad_check(lambda x: ad.reduce_mean(x, axes=(1,)), [x]) <= 1e-5
        assert ad.grad_check(lambda x: ad.reduce_sum(x, axes=(0, 2)), [x]) <= 1e-5


class TestSubsampleAndDiff:
    def test_subsample_values(self, prng):
        x = Tensor(prng.normal((1, 1, 6, 6), 1.0, dtype=np.float64))
        np.testing.assert_array_equal(ad.subsample(x, 2).data, x.data[:, :, ::2, ::2])

    def test_forward_diff_trailing_zero(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 1, 4))
        d = ad.forward_diff(x, 3).data
        np.testing.assert_array_equal(d.ravel(), [1.0, 1.0, 1.0, 0.0])

    def test_gradients(self, prng):
        x = t64(prng, (1, 2, 4, 6))
        assert ad.grad_check(lambda x: ad.subsample(x, 2), [x]) <= 1e-6
        assert ad.grad_check(lambda x: ad.forward_diff(x, 2), [x]) <= 1e-6
        assert ad.grad_check(lambda x: ad.normalize_sum(ad.square(x), 1), [x]) <= 1e-5


class TestBackwardContract:
    def test_sum_gives_ones(self, prng):
        x = t64(prng, (3, 3))
        with Tape():
            grads = ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(grads[x], np.ones_like(x.data))

    def test_zero_gradient_at_minimum(self, prng):
        x = t64(prng, (4,))
        y = Tensor(x.data.copy())
        with Tape():
            ad.backward(ad.reduce_mean(ad.square(ad.sub(x, y))))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_non_scalar_loss_rejected(self, prng):
        x = t64(prng, (3,))
        with Tape():
            y = ad.square(x)
            with pytest.raises(ValueError, match="scalar"):
                ad.backward(y)

    def test_detached_loss_rejected(self, prng):
        x = t64(prng, (3,))
        with Tape():
            loss = ad.reduce_sum(x)
        with Tape():
            with pytest.raises(ValueError, match="detached"):
                ad.backward(loss)

    def test_tape_consumable_once(self, prng):
        x = t64(prng, (3,))
        with Tape():
            loss = ad.reduce_sum(ad.square(x))
            ad.backward(loss)
            with pytest.raises(RuntimeError, match="consumed"):
                ad.backward(loss)

    def test_accumulation_is_summation(self, prng):
        x = t64(prng, (5,))
        with Tape():
            ad.backward(ad.reduce_sum(ad.add(ad.mul(x, x), ad.scale(x, 3.0))))
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 3.0, rtol=1e-15)

    def test_two_uses_equal_sum_of_single_uses(self, prng):
        base = prng.normal((6,), 1.0, dtype=np.float64)

        def single(fn):
            t = Tensor(base.copy(), requires_grad=True)
            with Tape():
                ad.backward(fn(t))
            return t.grad

        g_sq = single(lambda t: ad.reduce_sum(ad.square(t)))
        g_tanh = single(lambda t: ad.reduce_sum(ad.tanh(t)))
        both = Tensor(base.copy(), requires_grad=True)
        with Tape():
            ad.backward(ad.add(ad.reduce_sum(ad.square(both)), ad.reduce_sum(ad.tanh(both))))
        np.testing.assert_array_equal(both.grad, g_sq + g_tanh)

    def test_unreached_leaf_gets_zeros(self, prng):
        x, y = t64(prng, (3,)), t64(prng, (3,))
        with Tape():
            ad.mul(y, y)  # participates but does not feed the loss
            ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(y.grad, np.zeros_like(y.data))

    def test_no_grads_without_tape(self, prng):
        x = t64(prng, (3,))
        ad.square(x)
        assert x.grad is None

    def test_detach_never_receives_gradients(self, prng):
        x = t64(prng, (3,))
        d = x.detach()
        with Tape():
            ad.backward(ad.reduce_sum(ad.mul(ad.square(x), d)))
        assert d.grad is None and x.grad is not None


class TestNonFinite:
    def test_nan_tensor_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_inf_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.inf]))

    def test_checks_can_be_disabled(self):
        with ad.finite_checks(False):
            t = Tensor(np.array([np.nan]))
        assert np.isnan(t.data[0])


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        st_ = AdamState.for_params([p], lr=1e-3)
        before = p.data.copy()
        ad.adam_step([p], [np.zeros(2)], st_)
        np.testing.assert_array_equal(p.data, before)
        assert st_.step == 1

    def test_first_step_hand_computed(self):
        # m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        p = Tensor(np.array(1.0), requires_grad=True)
        st_ = AdamState.for_params([p], lr=1e-4)
        ad.adam_step([p], [np.array(1.0)], st_)
        assert abs((1.0 - p.item()) - 1e-4) <= 1e-7

    def test_multi_step_matches_reference(self, prng):
        # independent single-variable reference recursion
        g_seq = prng.normal((6,), 1.0, dtype=np.float64)
        p = Tensor(np.array(0.5), requires_grad=True)
        st_ = AdamState.for_params([p], lr=0.01)
        m = v = 0.0
        ref = 0.5
        for t, g in enumerate(g_seq, start=1):
            ad.adam_step([p], [np.asarray(g)], st_)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p.item() - ref) <= 1e-12

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        st_ = AdamState.for_params([p])
        with pytest.raises(ValueError):
            ad.adam_step([p], [np.zeros(4)], st_)

    def test_determinism(self):
        def run():
            prng = Prng(7)
            p = ad.init_normal((8,), 0.5, prng, dtype=np.float32)
            st_ = AdamState.for_params([p], lr=1e-3)
            for _ in range(5):
                ad.adam_step([p], [prng.normal((8,), 1.0, dtype=np.float32)], st_)
            return p.data.tobytes()

        assert run() == run()


class TestPrngAndInit:
    def test_same_seed_identical(self):
        a = Prng(99).normal((10,), 1.0)
        b = Prng(99).normal((10,), 1.0)
        assert a.tobytes() == b.tobytes()

    def test_zero_std_gives_zeros(self, prng):
        t = ad.init_normal((4, 4), 0.0, prng)
        np.testing.assert_array_equal(t.data, 0.0)

    def test_negative_std_rejected(self, prng):
        with pytest.raises(ValueError):
            ad.init_normal((2,), -1.0, prng)

    def test_spawned_streams_differ(self):
        p = Prng(5)
        a = p.spawn("x").normal((4,), 1.0)
        b = p.spawn("y").normal((4,), 1.0)
        assert a.tobytes() != b.tobytes()

    def test_state_roundtrip_continues_stream(self):
        p = Prng(3)
        p.normal((5,), 1.0)
        state = p.get_state()
        rest = p.normal((5,), 1.0)
        q = Prng(3)
        q.set_state(state)
        np.testing.assert_array_equal(q.normal((5,), 1.0), rest)


class TestGradCheckUtility:
    def test_conv_small_instance(self, prng):
        x = t64(prng, (1, 1, 5, 5))
        w = t64(prng, (2, 1, 3, 3), 0.5)
        assert ad.grad_check(lambda x, w: ad.conv2d(x, w, None, 1, 1), [x, w]) <= 1e-6

    def test_catches_a_wrong_gradient(self, prng):
        # a deliberately broken derivative must produce a large error
        def bad(x):
            y = np.tanh(x.data)
            out = Tensor(y)
            if ad._recording(x):
                ad.register(out, (x,), lambda g: ad.accumulate_grad(x, g * 0.5))
            return out

        x = t64(prng, (4,))
        assert ad.grad_check(bad, [x]) > 1e-2
