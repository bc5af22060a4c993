"""Reverse-mode engine: fixtures, finite-difference properties, tape semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paragraph_rationales import autodiff as ad
from paragraph_rationales.autodiff import Tensor

SEEDS = st.integers(min_value=0, max_value=2**31 - 1)
FAST = settings(max_examples=25, deadline=None)


def param(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def grads_of(loss_fn, *tensors):
    for t in tensors:
        t.zero_grad()
    with ad.Tape():
        loss = loss_fn()
        ad.backward(loss)
    return [t.grad.copy() for t in tensors]


def central_difference(f, x, eps=1e-6):
    flat = x.value.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(x.shape)


class TestForwardFixtures:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(0.0).item() == 0.5

    def test_maxpool_rows(self):
        out = ad.maxpool([[1.0, 5.0], [3.0, 2.0]], axis=0)
        np.testing.assert_array_equal(out.value, [3.0, 5.0])

    def test_cosine_orthogonal(self):
        assert ad.cosine([1.0, 0.0], [0.0, 1.0]).item() == 0.0

    def test_cosine_zero_norm_is_zero(self):
        assert ad.cosine([0.0, 0.0], [1.0, 2.0]).item() == 0.0

    def test_selu_constants(self):
        np.testing.assert_allclose(ad.selu(1.0).item(), ad.SELU_SCALE, rtol=0, atol=1e-15)
        expected = ad.SELU_SCALE * ad.SELU_ALPHA * (np.exp(-1.0) - 1.0)
        np.testing.assert_allclose(ad.selu(-1.0).item(), expected, rtol=0, atol=1e-15)
        assert ad.selu(0.0).item() == 0.0

    def test_bce_half(self):
        np.testing.assert_allclose(ad.bce([0.5], [1.0]).value, [np.log(2.0)], atol=1e-15)

    def test_bce_saturated_probability_stays_finite(self):
        out = ad.bce([0.0, 1.0], [1.0, 0.0]).value
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, -np.log(ad.BCE_EPS), rtol=1e-6)

    def test_hinge(self):
        np.testing.assert_array_equal(ad.hinge([-0.2, 0.0, 0.6]).value, [0.0, 0.0, 0.6])

    def test_masked_softmax_ignores_invalid(self):
        out = ad.softmax([[1.0, 2.0, 100.0]], axis=-1, valid=np.array([[True, True, False]])).value
        assert out[0, 2] == 0.0
        np.testing.assert_allclose(out.sum(), 1.0)

    def test_maxpool_invalid_rows_never_win(self):
        out = ad.maxpool([[1.0], [9.0]], axis=0, valid=np.array([True, False]))
        np.testing.assert_array_equal(out.value, [1.0])

    def test_shape_mismatch_names_primitive_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(np.ones(3), np.ones(4))


class TestStraightThrough:
    def test_strict_threshold(self):
        z = ad.straight_through_threshold(np.array([0.6, 0.4, 0.5]), 0.5)
        np.testing.assert_array_equal(z.value, [1.0, 0.0, 0.0])

    def test_all_above(self):
        np.testing.assert_array_equal(ad.straight_through_threshold([1.0, 1.0]).value, [1.0, 1.0])

    def test_backward_is_identity(self):
        a = param([0.7, 0.2])
        (g,) = grads_of(lambda: ad.sum_(ad.straight_through_threshold(a) * np.array([0.3, -0.2])), a)
        np.testing.assert_array_equal(g, [0.3, -0.2])

    def test_rejects_scores_outside_unit_interval(self):
        with pytest.raises(ValueError):
            ad.straight_through_threshold([1.2, 0.3])
        with pytest.raises(ValueError):
            ad.straight_through_threshold([-0.1])

    @FAST
    @given(seed=SEEDS, n=st.integers(1, 20))
    def test_output_binary_and_jacobian_identity(self, seed, n):
        rng = np.random.default_rng(seed)
        a = param(rng.random(n))
        z = ad.straight_through_threshold(a)
        assert set(np.unique(z.value)) <= {0.0, 1.0}
        upstream = rng.normal(size=n)
        (g,) = grads_of(lambda: ad.sum_(ad.straight_through_threshold(a) * upstream), a)
        np.testing.assert_array_equal(g, upstream)

    def test_gradient_matches_soft_surrogate_differences(self):
        """The hard threshold is flat almost everywhere; the analytic gradient
        must instead match finite differences of the identity surrogate."""
        rng = np.random.default_rng(3)
        w = param(rng.normal(size=4))
        weights = rng.normal(size=4)

        def loss(hard):
            return ad.sum_(ad.straight_through_threshold(ad.sigmoid(w), hard=hard) * weights)

        (analytic,) = grads_of(lambda: loss(True), w)
        numeric = central_difference(lambda: loss(False), w)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-10)
        assert np.all(central_difference(lambda: loss(True), w) == 0.0)


class TestBackwardFixtures:
    def test_sum(self):
        x = param([1.0, 2.0, 3.0])
        (g,) = grads_of(lambda: ad.sum_(x), x)
        np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])

    def test_mean(self):
        x = param(np.arange(4.0))
        (g,) = grads_of(lambda: ad.mean(x), x)
        np.testing.assert_array_equal(g, [0.25] * 4)

    def test_chain_rule(self):
        w = param(0.0)
        (g,) = grads_of(lambda: ad.sigmoid(w) * 2.0, w)
        assert g == 0.5

    def test_non_scalar_loss_rejected(self):
        x = param([1.0, 2.0])
        with ad.Tape():
            y = x * 2.0
            with pytest.raises(ad.ShapeError):
                ad.backward(y)

    def test_ndarray_on_the_left_defers_to_tensor(self):
        x = param([1.0, 2.0])
        with ad.Tape():
            y = np.array([3.0, 4.0]) * x
        assert isinstance(y, Tensor)
        np.testing.assert_array_equal(y.value, [3.0, 8.0])

    def test_nothing_recorded_without_tape(self):
        x = param([1.0])
        y = ad.sigmoid(x)
        assert not y.requires_grad and y._tape is None

    def test_constants_are_not_recorded(self):
        with ad.Tape() as tape:
            ad.sigmoid(Tensor([1.0]))
        assert len(tape) == 0

    def test_repeated_backward_accumulates(self):
        x = param([1.0, -2.0])
        x.zero_grad()
        with ad.Tape():
            loss = ad.sum_(x * x)
            ad.backward(loss)
            ad.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * (2 * x.value))

    def test_tape_order_is_topological(self):
        x = param([0.5, 1.5])
        with ad.Tape() as tape:
            ad.sum_(ad.sigmoid(x * 2.0) + x)
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen or not i.requires_grad for i in node._inputs)
            seen.add(id(node))


class TestLinearity:
    @FAST
    @given(seed=SEEDS, a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_gradient_of_weighted_sum(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=5))
        l1 = lambda: ad.sum_(ad.sigmoid(x) * x)  # noqa: E731
        l2 = lambda: ad.mean(ad.selu(x))  # noqa: E731
        (g1,) = grads_of(l1, x)
        (g2,) = grads_of(l2, x)
        (g,) = grads_of(lambda: l1() * a + l2() * b, x)
        np.testing.assert_allclose(g, a * g1 + b * g2, rtol=1e-12, atol=1e-12)


class TestDeterminism:
    def test_replay_is_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(11)
            w = param(rng.normal(size=(4, 3)))
            x = rng.normal(size=(5, 4))
            with ad.Tape():
                loss = ad.mean(ad.bce(ad.sigmoid(x @ w), (rng.random((5, 3)) > 0.5) * 1.0))
                ad.backward(loss)
            return loss.item(), w.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        assert np.array_equal(g1, g2)


# --------------------------------------------------------- gradient checks


def _check(loss_fn, *tensors, tol=1e-4):
    err = ad.gradient_check(lambda _: loss_fn(), list(tensors), epsilon=1e-6)
    assert err < tol, f"max relative error {err:.2e}"


def _shape(rng):
    return tuple(int(n) for n in rng.integers(1, 5, size=int(rng.integers(1, 3))))


class TestPrimitiveGradients:
    """Every differentiable primitive against central differences."""

    @FAST
    @given(seed=SEEDS)
    def test_elementwise_binary(self, seed):
        rng = np.random.default_rng(seed)
        shape = _shape(rng)
        a, b = param(rng.normal(size=shape)), param(rng.uniform(0.5, 2.0, size=shape))
        weights = rng.normal(size=shape)
        _check(lambda: ad.sum_((a * b + a - b / 3.0) * weights), a, b)
        _check(lambda: ad.sum_(ad.div(a, b) * weights), a, b)

    @FAST
    @given(seed=SEEDS)
    def test_broadcasting(self, seed):
        rng = np.random.default_rng(seed)
        a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4,)))
        weights = rng.normal(size=(3, 4))
        _check(lambda: ad.sum_((a * b + b) * weights), a, b)

    @FAST
    @given(seed=SEEDS)
    def test_unary(self, seed):
        rng = np.random.default_rng(seed)
        shape = _shape(rng)
        x = param(rng.normal(size=shape) + np.sign(rng.normal(size=shape)) * 0.05)
        weights = rng.normal(size=shape)
        for fn in (ad.sigmoid, ad.selu, ad.exp, ad.abs_, ad.relu, ad.neg):
            _check(lambda fn=fn: ad.sum_(fn(x) * weights), x)
        pos = param(rng.uniform(0.2, 3.0, size=shape))
        _check(lambda: ad.sum_(ad.log(pos) * weights), pos)

    @FAST
    @given(seed=SEEDS)
    def test_reductions(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=(3, 4)))
        w0, w1 = rng.normal(size=4), rng.normal(size=3)
        _check(lambda: ad.sum_(ad.sum_(x, axis=0) * w0) + ad.sum_(ad.mean(x, axis=1) * w1), x)

    @FAST
    @given(seed=SEEDS)
    def test_maxpool(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=(5, 3)))
        valid = rng.random(5) < 0.7
        valid[0] = True
        w = rng.normal(size=3)
        _check(lambda: ad.sum_(ad.maxpool(x, axis=0, valid=valid) * w), x)

    @FAST
    @given(seed=SEEDS)
    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=(2, 5)))
        valid = rng.random((2, 5)) < 0.8
        valid[:, 0] = True
        w = rng.normal(size=(2, 5))
        _check(lambda: ad.sum_(ad.softmax(x, axis=-1, valid=valid) * w), x)

    @FAST
    @given(seed=SEEDS)
    def test_matmul_batched(self, seed):
        rng = np.random.default_rng(seed)
        a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4, 2)))
        w = rng.normal(size=(2, 3, 2))
        _check(lambda: ad.sum_(ad.matmul(a, b) * w), a, b)

    @FAST
    @given(seed=SEEDS)
    def test_shape_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = param(rng.normal(size=(2, 3)))
        y = param(rng.normal(size=(1, 3)))
        w = rng.normal(size=(3, 3))
        _check(lambda: ad.sum_(ad.concat([ad.transpose(ad.reshape(x, (3, 2)), (1, 0)), y], axis=0) * w), x, y)
        wb = rng.normal(size=(4, 3))
        _check(lambda: ad.sum_(ad.broadcast_to(y, (4, 3)) * wb), y)
        _check(lambda: ad.sum_(x[:, 1:] * 2.0), x)

    @FAST
    @given(seed=SEEDS)
    def test_embedding_with_repeats(self, seed):
        rng = np.random.default_rng(seed)
        table = param(rng.normal(size=(6, 3)))
        ids = rng.integers(0, 6, size=(2, 4))
        w = rng.normal(size=(2, 4, 3))
        _check(lambda: ad.sum_(ad.embedding(table, ids) * w), table)

    @FAST
    @given(seed=SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = param(rng.normal(size=(3, 5))), param(rng.normal(size=5)), param(rng.normal(size=5))
        w = rng.normal(size=(3, 5))
        _check(lambda: ad.sum_(ad.layer_norm(x, g, b) * w), x, g, b)

    @FAST
    @given(seed=SEEDS)
    def test_cosine(self, seed):
        rng = np.random.default_rng(seed)
        a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(3, 4)))
        w = rng.normal(size=3)
        _check(lambda: ad.sum_(ad.cosine(a, b) * w), a, b)

    @FAST
    @given(seed=SEEDS)
    def test_bce(self, seed):
        rng = np.random.default_rng(seed)
        p = param(rng.uniform(0.05, 0.95, size=6))
        y = (rng.random(6) < 0.5) * 1.0
        _check(lambda: ad.sum_(ad.bce(p, y)), p)


class TestGradientCheckOracle:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(0)
        x = param(rng.normal(size=(1, 5)))
        A = rng.normal(size=(5, 5))
        err = ad.gradient_check(lambda _: ad.sum_((x @ A) * x), [x], epsilon=1e-5)
        assert err < 1e-6

    def test_detects_corrupted_backward(self):
        x = param(np.array([0.3, -0.4]))

        def broken_square(t):
            return ad._make(t.value**2, (t,), lambda g: (g * t.value,), "broken")  # missing factor 2

        err = ad.gradient_check(lambda _: ad.sum_(broken_square(x)), [x])
        assert err > 0.1

    def test_rejects_non_positive_epsilon(self):
        with pytest.raises(ValueError):
            ad.gradient_check(lambda _: ad.sum_(param([1.0])), [param([1.0])], epsilon=0.0)

    def test_non_finite_loss_fails(self):
        x = param([-1.0])
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            ad.gradient_check(lambda _: ad.sum_(ad.log(x)), [x])
