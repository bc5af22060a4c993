"""Objectives: worked fixtures, algebraic properties and gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paragraph_rationales import autodiff as ad
from paragraph_rationales import losses as L
from paragraph_rationales.autodiff import Tensor

SEEDS = st.integers(min_value=0, max_value=2**31 - 1)
FAST = settings(max_examples=30, deadline=None)
TOL = 1e-10

binary_masks = st.lists(st.integers(0, 1), min_size=1, max_size=12).map(lambda v: np.array(v, dtype=float))


def val(t):
    return float(np.asarray(t.value))


class TestClassificationLoss:
    """Summed binary cross-entropy."""

    def test_half_probability(self):
        assert abs(val(L.classification_loss([0.5], [1.0])) - np.log(2)) < TOL

    def test_two_labels_sum(self):
        out = val(L.classification_loss([0.9, 0.1], [1.0, 0.0]))
        assert abs(out - 2 * -np.log(0.9)) < TOL

    def test_perfect_prediction_clamped(self):
        out = val(L.classification_loss([1.0, 0.0], [1.0, 0.0]))
        assert np.isfinite(out) and abs(out) < TOL

    def test_wrong_certain_prediction_is_finite(self):
        out = val(L.classification_loss([0.0], [1.0]))
        assert np.isfinite(out) and out > 20


class TestSparsityLoss:
    def test_exact_target(self):
        z = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
        assert abs(val(L.sparsity_loss(np.array(z, float), 0.3))) < TOL

    def test_all_selected(self):
        assert abs(val(L.sparsity_loss(np.ones(10), 0.3)) - 0.7) < TOL

    def test_one_of_five(self):
        assert abs(val(L.sparsity_loss(np.array([1.0, 0, 0, 0, 0]), 0.3)) - 0.1) < TOL

    def test_padding_ignored(self):
        z = np.array([[1.0, 0.0, 1.0, 1.0]])
        valid = np.array([[1.0, 1.0, 0.0, 0.0]])
        assert abs(val(L.sparsity_loss(z, 0.3, valid)[0]) - 0.2) < TOL

    @FAST
    @given(binary_masks, st.floats(0.01, 0.99))
    def test_non_negative_and_zero_iff_on_target(self, z, target):
        out = val(L.sparsity_loss(z, target))
        assert out >= 0
        assert (out == 0) == (z.mean() == target)


class TestContinuityLoss:
    def test_one_transition(self):
        assert abs(val(L.continuity_loss(np.array([1.0, 1, 0, 0]))) - 1 / 3) < TOL

    def test_alternating(self):
        assert abs(val(L.continuity_loss(np.array([1.0, 0, 1, 0]))) - 1.0) < TOL

    def test_constant(self):
        assert val(L.continuity_loss(np.ones(6))) == 0.0

    def test_single_paragraph(self):
        assert val(L.continuity_loss(np.array([1.0]))) == 0.0

    @FAST
    @given(binary_masks)
    def test_range_and_extremes(self, z):
        out = val(L.continuity_loss(z))
        assert 0.0 <= out <= 1.0 + TOL
        assert (out == 0.0) == bool(np.all(z == z[0]))
        if len(z) >= 2:
            alternating = bool(np.all(z[1:] != z[:-1]))
            assert (abs(out - 1.0) < TOL) == alternating


class TestComprehensivenessFixtures:
    def test_loss_margin_inactive(self):
        assert val(L.comprehensiveness_loss_margin(0.5, 1.0, 0.3)) == 0.0

    def test_loss_margin_active(self):
        assert abs(val(L.comprehensiveness_loss_margin(1.0, 0.5, 0.1)) - 0.6) < TOL

    def test_loss_margin_equal_no_margin(self):
        assert val(L.comprehensiveness_loss_margin(0.7, 0.7, 0.0)) == 0.0

    def test_prob_hinged_to_zero(self):
        out = L.comprehensiveness_prob([0.9, 0.2], [0.3, 0.6], [1.0, 0.0], 0.1)
        assert val(out) == 0.0

    def test_prob_identical_gives_margin(self):
        out = L.comprehensiveness_prob([0.3, 0.8, 0.1], [0.3, 0.8, 0.1], [1.0, 0.0, 1.0], 0.25)
        assert abs(val(out) - 0.25) < TOL

    def test_prob_single_label(self):
        out = L.comprehensiveness_prob([0.4], [0.9], [1.0], 0.0)
        assert abs(val(out) - 0.5) < TOL

    def test_prob_hinge_wraps_mean_not_terms(self):
        # Terms +0.5 and -0.3: per-term clamping would give 0.25, the outer hinge 0.1.
        out = L.comprehensiveness_prob([0.4, 0.5], [0.9, 0.2], [1.0, 1.0], 0.0)
        assert abs(val(out) - 0.1) < TOL

    def test_repr_identical(self):
        assert abs(val(L.comprehensiveness_repr([1.0, 2.0, -1.0], [1.0, 2.0, -1.0])) - 1.0) < TOL

    def test_repr_orthogonal(self):
        assert val(L.comprehensiveness_repr([1.0, 0.0], [0.0, 3.0])) == 0.0

    def test_repr_opposite(self):
        assert abs(val(L.comprehensiveness_repr([1.0, -2.0], [-1.0, 2.0])) - 1.0) < TOL

    def test_repr_zero_vector(self):
        assert val(L.comprehensiveness_repr([0.0, 0.0], [1.0, 2.0])) == 0.0


class TestComprehensivenessRanges:
    @FAST
    @given(SEEDS)
    def test_outputs_in_range(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 8))
        p, q = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        y = rng.integers(0, 2, n).astype(float)
        h = rng.uniform(0, 0.5)
        assert val(L.comprehensiveness_loss_margin(rng.normal(), rng.normal(), h)) >= 0
        assert val(L.comprehensiveness_prob(p, q, y, h)) >= 0
        r = val(L.comprehensiveness_repr(rng.normal(size=n), rng.normal(size=n)))
        assert 0.0 <= r <= 1.0 + TOL


class TestRandomMask:
    def test_thirty_percent_of_ten(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = L.random_mask(10, 0.3, rng)
            assert m.sum() == 3 and set(np.unique(m)) <= {0.0, 1.0}

    def test_single_paragraph(self):
        np.testing.assert_array_equal(L.random_mask(1, 0.01, np.random.default_rng(0)), [1.0])

    def test_minimum_one(self):
        assert L.random_mask(3, 0.05, np.random.default_rng(0)).sum() == 1

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            L.random_mask(0, 0.3, np.random.default_rng(0))

    def test_uniform_positions(self):
        rng = np.random.default_rng(123)
        freq = np.mean([L.random_mask(10, 0.3, rng) for _ in range(10_000)], axis=0)
        assert np.all(np.abs(freq - 0.3) <= 0.02)

    def test_padded_batch(self):
        out = L.random_masks(np.array([4, 10, 1]), 10, 0.3, np.random.default_rng(1))
        assert out.shape == (3, 10)
        np.testing.assert_array_equal(out.sum(axis=1), [1, 3, 1])
        assert out[0, 4:].sum() == 0 and out[2, 1:].sum() == 0

    def test_fresh_draws(self):
        rng = np.random.default_rng(5)
        draws = {tuple(L.random_mask(10, 0.3, rng)) for _ in range(20)}
        assert len(draws) > 1


class TestSingularity:
    def _terms(self, rng, n_labels=3, dim=4):
        return L.PassTerms(
            lp=Tensor(rng.uniform(0, 2)), probs=Tensor(rng.uniform(0, 1, n_labels)), doc=Tensor(rng.normal(size=dim))
        )

    def test_identical_masks_give_zero(self):
        z = np.array([1.0, 0, 1, 0])
        assert abs(val(L.mask_gamma(z, z))) < TOL
        rng = np.random.default_rng(0)
        out = L.singularity_loss(z, z, "loss-margin", self._terms(rng), self._terms(rng), [1.0, 0, 0], 0.1)
        assert abs(val(out)) < TOL

    @pytest.mark.parametrize("variant", L.VARIANTS)
    def test_disjoint_masks_equal_comprehensiveness(self, variant):
        rng = np.random.default_rng(1)
        main, other, y = self._terms(rng), self._terms(rng), np.array([1.0, 0.0, 1.0])
        z, zr = np.array([1.0, 1, 0, 0]), np.array([0.0, 0, 1, 1])
        expected = val(L.comprehensiveness(variant, main, other, y, 0.1))
        assert abs(val(L.singularity_loss(z, zr, variant, main, other, y, 0.1)) - expected) < TOL

    def test_half_overlap(self):
        assert abs(val(L.mask_gamma([1.0, 1, 0, 0], [1.0, 0, 1, 0])) - 0.5) < TOL

    def test_unknown_variant(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            L.comprehensiveness("bogus", self._terms(rng), self._terms(rng), [1.0, 0, 0], 0.1)

    @FAST
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=10))
    def test_gamma_range(self, pairs):
        z = np.array([a for a, _ in pairs], float)
        zr = np.array([b for _, b in pairs], float)
        g = val(L.mask_gamma(z, zr))
        assert -TOL <= g <= 1.0 + TOL
        if z.any() and zr.any():
            assert (abs(g) < TOL) == bool(np.array_equal(z, zr))


class TestSupervisionLoss:
    def test_equal(self):
        assert val(L.supervision_loss(np.array([1.0, 0, 1]), np.array([1.0, 0, 1]))) == 0.0

    def test_one_swap(self):
        out = L.supervision_loss(np.array([1.0, 0, 0, 0]), np.array([0.0, 1, 0, 0]))
        assert abs(val(out) - 0.5) < TOL

    def test_complement(self):
        out = L.supervision_loss(np.array([1.0, 0, 1]), np.array([0.0, 1, 0]))
        assert abs(val(out) - 1.0) < TOL

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            L.supervision_loss(np.ones(3), np.ones(4))

    @FAST
    @given(SEEDS)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        a, b = rng.integers(0, 2, n).astype(float), rng.integers(0, 2, n).astype(float)
        assert val(L.supervision_loss(a, b)) == val(L.supervision_loss(b, a))

    def test_gradient_reaches_scores(self):
        scores = Tensor(np.array([0.7, 0.2, 0.9]), requires_grad=True)
        with ad.Tape():
            z = ad.straight_through_threshold(scores)
            ad.backward(L.supervision_loss(z, np.array([0.0, 1.0, 1.0])))
        # d|z - s|/dz is sign(z - s): +1 for a wrong selection, -1 for a missed one.
        np.testing.assert_array_equal(scores.grad, np.array([1.0, -1.0, 0.0]) / 3)


def comps(**values):
    return {k: Tensor(np.array([v])) for k, v in values.items()}


class TestTotalLoss:
    def test_all_zero_weights(self):
        loss, _ = L.total_loss(comps(L_p=0.7, L_s=0.2), L.LossWeights())
        assert abs(loss.item() - 0.7) < TOL

    def test_sparsity_weight(self):
        loss, _ = L.total_loss(comps(L_p=0.7, L_s=0.2), L.LossWeights(lambda_s=0.1))
        assert abs(loss.item() - 0.72) < TOL

    def test_comprehensiveness_adds_complement_loss(self):
        w = L.LossWeights(lambda_g=1e-3)
        loss, _ = L.total_loss(comps(L_p=0.5, L_g=0.4, L_p_c=2.0), w)
        assert abs(loss.item() - (0.5 + 1e-3 * 2.4)) < TOL

    def test_singularity_adds_random_loss(self):
        loss, _ = L.total_loss(comps(L_p=0.5, L_r=0.2, L_p_r=1.0), L.LossWeights(lambda_r=0.5))
        assert abs(loss.item() - 1.1) < TOL

    def test_supervision_replaces_regularizers(self):
        w = L.LossWeights(lambda_s=1.0, lambda_ns=0.5)
        loss, br = L.total_loss(comps(L_p=0.5, L_s=9.0, L_sup=0.4), w, supervision=True)
        assert abs(loss.item() - 0.7) < TOL
        assert abs(L.reassemble(br, w, supervision=True) - 0.7) < TOL

    @pytest.mark.parametrize(
        "weights,present",
        [
            (L.LossWeights(lambda_s=0.1), {"L_p"}),
            (L.LossWeights(lambda_g=0.1), {"L_p", "L_g"}),
            (L.LossWeights(lambda_r=0.1), {"L_p", "L_p_r"}),
        ],
    )
    def test_missing_component_fails(self, weights, present):
        with pytest.raises(ValueError):
            L.total_loss(comps(**{k: 0.1 for k in present}), weights)

    def test_breakdown_marks_inactive(self):
        _, br = L.total_loss(comps(L_p=0.5), L.LossWeights())
        line = br.to_log_line(3).split("\t")
        assert line[0] == "3" and line[1] == repr(0.5) and line[2] == "-"

    @FAST
    @given(SEEDS)
    def test_linear_in_each_weight(self, seed):
        rng = np.random.default_rng(seed)
        parts = comps(**{n: float(rng.uniform(0, 2)) for n in L.COMPONENTS if n != "L_sup"})
        base = dict(lambda_s=rng.uniform(0, 1), lambda_c=rng.uniform(0, 1), lambda_g=rng.uniform(0, 1),
                    lambda_r=rng.uniform(0, 1))
        for name in base:
            at = lambda x: L.total_loss(parts, L.LossWeights(**{**base, name: x}))[0].item()
            f0, f1, f2 = at(0.0), at(1.0), at(2.0)
            assert abs((f2 - f1) - (f1 - f0)) < 1e-9

    @FAST
    @given(SEEDS)
    def test_reassemble_matches_total(self, seed):
        rng = np.random.default_rng(seed)
        parts = comps(**{n: float(rng.uniform(0, 2)) for n in L.COMPONENTS if n != "L_sup"})
        w = L.LossWeights(lambda_s=0.1, lambda_c=0.2, lambda_g=0.3, lambda_r=0.4)
        loss, br = L.total_loss(parts, w)
        assert abs(L.reassemble(br, w) - loss.item()) < 1e-12


class TestLossWeights:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(lambda_s=-1.0), dict(sparsity_target=0.0), dict(sparsity_target=1.0), dict(g_variant="x")],
    )
    def test_validate_rejects(self, kwargs):
        with pytest.raises(ValueError):
            L.LossWeights(**kwargs).validate()


class TestSurrogateGradients:
    """Every objective differentiates correctly through the soft surrogate."""

    @pytest.mark.parametrize(
        "name",
        ["sparsity", "continuity", "supervision", "bce", "loss-margin", "prob-margin", "repr-cosine", "singularity"],
    )
    def test_gradient_check(self, name):
        rng = np.random.default_rng(7)
        a = Tensor(rng.uniform(0.05, 0.95, size=(2, 6)), requires_grad=True)
        b = Tensor(rng.uniform(0.05, 0.95, size=(2, 6)), requires_grad=True)
        y = rng.integers(0, 2, size=(2, 6)).astype(float)
        y[:, 0] = 1.0 - y[:, 1]
        silver = rng.integers(0, 2, size=(2, 6)).astype(float)
        zr = np.array([[1.0, 0, 1, 0, 0, 0], [0, 1, 0, 0, 1, 0]])

        def loss(params):
            p, q = params
            z = ad.straight_through_threshold(p, hard=False)
            if name == "sparsity":
                out = L.sparsity_loss(z, 0.3)
            elif name == "continuity":
                out = L.continuity_loss(z)
            elif name == "supervision":
                out = L.supervision_loss(z, silver)
            elif name == "bce":
                out = L.classification_loss(p, y)
            elif name == "loss-margin":
                out = L.comprehensiveness_loss_margin(L.classification_loss(p, y), L.classification_loss(q, y), 1.0)
            elif name == "prob-margin":
                out = L.comprehensiveness_prob(p, q, y, 0.6)
            elif name == "repr-cosine":
                out = L.comprehensiveness_repr(p - 0.5, q - 0.5)
            else:
                main = L.PassTerms(L.classification_loss(p, y), p, p)
                other = L.PassTerms(L.classification_loss(q, y), q, q)
                out = L.singularity_loss(z, zr, "prob-margin", main, other, y, 0.6)
            return ad.sum_(out)

        # Piecewise-linear objectives are exact under a wider step, which keeps
        # roundoff off entries whose true gradient cancels to zero.
        assert ad.gradient_check(loss, [a, b], epsilon=1e-4) <= 1e-4
