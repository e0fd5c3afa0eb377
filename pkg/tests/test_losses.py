"""Tests for the four strategy losses: identities, oracles, gradients."""

import math

import numpy as np
import pytest

from openspectra import autodiff as ad
from openspectra.errors import ConfigError, DatasetError
from openspectra.losses import (
    LossSpec,
    Strategy,
    background_class_encode,
    batch_loss,
    cross_entropy,
    entropic_open_set_loss,
    objectosphere_loss,
)
from openspectra.spectra import ClassRole

KNOWN = int(ClassRole.KNOWN)
IGNORED = int(ClassRole.IGNORED)
NEVER = int(ClassRole.NEVER_SEEN)


def softmax_np(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class TestSpec:
    def test_output_count(self):
        assert LossSpec(Strategy.SOFTMAX_THRESHOLD, 20).output_count == 20
        assert LossSpec(Strategy.BACKGROUND_CLASS, 20).output_count == 21
        assert LossSpec(Strategy.ENTROPIC_OPEN_SET, 20).output_count == 20
        assert LossSpec(Strategy.OBJECTOSPHERE, 20).output_count == 20

    def test_parse(self):
        assert Strategy.parse("objectosphere") == Strategy.OBJECTOSPHERE
        assert Strategy.parse(" Softmax_Threshold ") == Strategy.SOFTMAX_THRESHOLD
        with pytest.raises(ConfigError, match="expected one of"):
            Strategy.parse("banana")

    def test_validation(self):
        with pytest.raises(ConfigError, match="alpha"):
            LossSpec(Strategy.OBJECTOSPHERE, 20, alpha=-1.0)
        with pytest.raises(ConfigError, match="beta"):
            LossSpec(Strategy.OBJECTOSPHERE, 20, beta=0.0)
        with pytest.raises(ConfigError, match="at least 2"):
            LossSpec(Strategy.SOFTMAX_THRESHOLD, 1)

    def test_uses_ignored(self):
        assert not LossSpec(Strategy.SOFTMAX_THRESHOLD, 3).uses_ignored
        assert LossSpec(Strategy.BACKGROUND_CLASS, 3).uses_ignored


class TestCrossEntropy:
    def test_against_plain_float_math(self):
        rng = np.random.default_rng(0)
        scores_np = softmax_np(rng.normal(size=(5, 4)))
        labels = np.array([0, 3, 1, 2, 0])
        got = cross_entropy(ad.Tensor(scores_np), labels).item()
        want = -sum(math.log(scores_np[i, labels[i]]) for i in range(5)) / 5
        assert got == pytest.approx(want, rel=1e-14)

    def test_perfect_prediction_is_zero(self):
        scores = ad.Tensor(np.array([[1.0, 0.0, 0.0]]))
        assert cross_entropy(scores, np.array([0])).item() == 0.0

    def test_no_nan_when_padding_score_underflows(self):
        # a zero score in a non-label column must not poison the result
        scores = ad.Tensor(np.array([[1.0, 0.0]]))
        out = cross_entropy(scores, np.array([0]))
        assert np.isfinite(out.item())

    def test_out_of_range_label(self):
        scores = ad.Tensor(np.full((2, 3), 1 / 3))
        with pytest.raises(DatasetError, match="labels must be in"):
            cross_entropy(scores, np.array([0, 3]))


class TestEntropicOpenSet:
    def test_known_only_equals_cross_entropy(self):
        rng = np.random.default_rng(1)
        scores_np = softmax_np(rng.normal(size=(6, 20)))
        labels = rng.integers(0, 20, size=6)
        roles = np.full(6, KNOWN)
        scores = ad.Tensor(scores_np)
        a = entropic_open_set_loss(scores, roles, labels).item()
        b = cross_entropy(scores, labels).item()
        assert a == b

    def test_ignored_at_uniform_equals_log_c(self):
        c = 20
        scores = ad.Tensor(np.full((1, c), 1.0 / c))
        got = entropic_open_set_loss(scores, np.array([IGNORED]), np.array([-1])).item()
        assert got == pytest.approx(math.log(20), abs=1e-12)
        assert got == pytest.approx(2.995732273553991, abs=1e-12)

    def test_uniform_beats_1000_random_simplex_points(self):
        c = 20
        rng = np.random.default_rng(42)
        uniform_val = entropic_open_set_loss(
            ad.Tensor(np.full((1, c), 1.0 / c)), np.array([IGNORED]), np.array([-1])).item()
        for _ in range(1000):
            p = rng.dirichlet(np.ones(c))
            val = entropic_open_set_loss(
                ad.Tensor(p[None, :]), np.array([IGNORED]), np.array([-1])).item()
            assert val >= uniform_val - 1e-10

    def test_ignored_value_against_plain_float_math(self):
        # slightly off-uniform point, value checked against math.log directly
        c = 4
        eps = 1e-3
        p = np.array([0.25 + 3 * eps, 0.25 - eps, 0.25 - eps, 0.25 - eps])
        got = entropic_open_set_loss(
            ad.Tensor(p[None, :]), np.array([IGNORED]), np.array([-1])).item()
        want = -sum(math.log(v) for v in p) / c
        assert got == pytest.approx(want, rel=1e-14)
        assert got > math.log(c)

    def test_mixed_batch_is_unweighted_mean(self):
        rng = np.random.default_rng(2)
        c = 5
        scores_np = softmax_np(rng.normal(size=(4, c)))
        roles = np.array([KNOWN, IGNORED, KNOWN, IGNORED])
        labels = np.array([2, -1, 0, -1])
        got = entropic_open_set_loss(ad.Tensor(scores_np), roles, labels).item()
        want = (-math.log(scores_np[0, 2])
                - sum(math.log(v) for v in scores_np[1]) / c
                - math.log(scores_np[2, 0])
                - sum(math.log(v) for v in scores_np[3]) / c) / 4
        assert got == pytest.approx(want, rel=1e-13)

    def test_gradient_vanishes_at_uniform_for_ignored(self):
        # uniform scores are the minimum, so the logit gradient must be zero
        c = 20
        logits = ad.Tensor(np.zeros((2, c)), requires_grad=True)
        with ad.Tape() as tape:
            loss = entropic_open_set_loss(ad.softmax(logits),
                                          np.full(2, IGNORED), np.full(2, -1))
            tape.backward(loss)
        assert np.max(np.abs(logits.grad)) < 1e-10

    def test_never_seen_rejected(self):
        scores = ad.Tensor(np.full((1, 3), 1 / 3))
        with pytest.raises(DatasetError, match="test-only"):
            entropic_open_set_loss(scores, np.array([NEVER]), np.array([-1]))


class TestObjectosphere:
    def test_alpha_zero_is_bitwise_entropic(self):
        rng = np.random.default_rng(3)
        scores_np = softmax_np(rng.normal(size=(6, 8)))
        feats = ad.Tensor(rng.normal(size=(6, 16)))
        roles = np.array([KNOWN, IGNORED, KNOWN, IGNORED, KNOWN, KNOWN])
        labels = np.array([1, -1, 4, -1, 0, 7])
        scores = ad.Tensor(scores_np)
        vo = objectosphere_loss(scores, feats, roles, labels, alpha=0.0, beta=5.0).item()
        ve = entropic_open_set_loss(scores, roles, labels).item()
        assert vo == ve

    def test_known_hinge_value(self):
        # single known row, ||F||^2 = 4 < beta = 10: extra = alpha * (10 - 4)
        scores = ad.Tensor(np.array([[0.9, 0.1]]))
        feats = ad.Tensor(np.array([[2.0, 0.0]]))
        roles, labels = np.array([KNOWN]), np.array([0])
        vo = objectosphere_loss(scores, feats, roles, labels, alpha=0.5, beta=10.0).item()
        ve = entropic_open_set_loss(scores, roles, labels).item()
        assert vo - ve == pytest.approx(0.5 * 6.0, rel=1e-14)

    def test_known_hinge_inactive_above_beta(self):
        scores = ad.Tensor(np.array([[0.9, 0.1]]))
        feats = ad.Tensor(np.array([[4.0, 0.0]]))  # ||F||^2 = 16 > 10
        roles, labels = np.array([KNOWN]), np.array([0])
        vo = objectosphere_loss(scores, feats, roles, labels, alpha=0.5, beta=10.0).item()
        ve = entropic_open_set_loss(scores, roles, labels).item()
        assert vo == ve

    def test_ignored_term_is_squared_norm(self):
        scores = ad.Tensor(np.array([[0.5, 0.5]]))
        feats = ad.Tensor(np.array([[3.0, 4.0]]))  # ||F||^2 = 25
        roles, labels = np.array([IGNORED]), np.array([-1])
        vo = objectosphere_loss(scores, feats, roles, labels, alpha=0.2, beta=10.0).item()
        ve = entropic_open_set_loss(scores, roles, labels).item()
        assert vo - ve == pytest.approx(0.2 * 25.0, rel=1e-14)

    def test_known_feature_gradient_is_minus_two_alpha_f(self):
        # inside the hinge, d/dF of alpha * (beta - ||F||^2) is -2 alpha F
        alpha = 0.3
        feats = ad.Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
        scores = ad.Tensor(np.array([[0.8, 0.1, 0.1]]))
        with ad.Tape() as tape:
            loss = objectosphere_loss(scores, feats, np.array([KNOWN]),
                                      np.array([0]), alpha=alpha, beta=100.0)
            tape.backward(loss)
        assert np.allclose(feats.grad, -2.0 * alpha * feats.data, atol=1e-14)

    def test_ignored_feature_gradient_is_two_alpha_f(self):
        alpha = 0.3
        feats = ad.Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
        scores = ad.Tensor(np.array([[0.3, 0.3, 0.4]]))
        with ad.Tape() as tape:
            loss = objectosphere_loss(scores, feats, np.array([IGNORED]),
                                      np.array([-1]), alpha=alpha, beta=100.0)
            tape.backward(loss)
        assert np.allclose(feats.grad, 2.0 * alpha * feats.data, atol=1e-14)


class TestBackgroundEncode:
    def test_ignored_maps_to_extra_index(self):
        roles = np.array([KNOWN, IGNORED, KNOWN])
        labels = np.array([3, -1, 0])
        out = background_class_encode(roles, labels, known_class_count=5)
        assert np.array_equal(out, [3, 5, 0])

    def test_never_seen_rejected(self):
        with pytest.raises(DatasetError, match="test-only"):
            background_class_encode(np.array([NEVER]), np.array([-1]), 5)

    def test_unlabeled_known_rejected(self):
        with pytest.raises(DatasetError, match="without a class label"):
            background_class_encode(np.array([KNOWN]), np.array([-1]), 5)


class TestBatchLoss:
    def test_softmax_threshold_rejects_ignored(self):
        logits = ad.Tensor(np.zeros((2, 4)))
        feats = ad.Tensor(np.zeros((2, 8)))
        spec = LossSpec(Strategy.SOFTMAX_THRESHOLD, 4)
        with pytest.raises(DatasetError, match="known classes only"):
            batch_loss(logits, feats, np.array([KNOWN, IGNORED]), np.array([0, -1]), spec)

    def test_background_needs_extra_logit(self):
        logits = ad.Tensor(np.zeros((2, 4)))
        feats = ad.Tensor(np.zeros((2, 8)))
        spec = LossSpec(Strategy.BACKGROUND_CLASS, 4)
        with pytest.raises(DatasetError, match="expects 5 logits"):
            batch_loss(logits, feats, np.array([KNOWN, IGNORED]), np.array([0, -1]), spec)

    def test_uniform_logits_give_log_c_for_all_strategies(self):
        # fresh networks emit near-identical logits; every strategy's loss
        # starts near log(output_count) on known samples
        for strategy in Strategy:
            spec = LossSpec(strategy, 20, alpha=0.0)
            logits = ad.Tensor(np.zeros((3, spec.output_count)))
            feats = ad.Tensor(np.zeros((3, 8)))
            roles = np.full(3, KNOWN)
            labels = np.array([0, 5, 19])
            got = batch_loss(logits, feats, roles, labels, spec).item()
            assert got == pytest.approx(math.log(spec.output_count), rel=1e-12)

    def test_composite_gradcheck_all_strategies(self):
        # finite differences through softmax + every strategy head
        rng = np.random.default_rng(7)
        n, c, d = 4, 3, 5
        cases = {
            Strategy.SOFTMAX_THRESHOLD: (np.full(n, KNOWN), rng.integers(0, c, n)),
            Strategy.BACKGROUND_CLASS: (np.array([KNOWN, IGNORED, KNOWN, IGNORED]),
                                        np.array([0, -1, 2, -1])),
            Strategy.ENTROPIC_OPEN_SET: (np.array([KNOWN, IGNORED, KNOWN, IGNORED]),
                                         np.array([0, -1, 2, -1])),
            Strategy.OBJECTOSPHERE: (np.array([KNOWN, IGNORED, KNOWN, IGNORED]),
                                     np.array([0, -1, 2, -1])),
        }
        for strategy, (roles, labels) in cases.items():
            spec = LossSpec(strategy, c, alpha=0.25, beta=1.5)
            logits = ad.Tensor(rng.normal(size=(n, spec.output_count)))
            # keep squared norms away from beta so the hinge has no kink nearby
            feats = ad.Tensor(rng.normal(size=(n, d)) * 2.0)

            def f(lg, ft, roles=roles, labels=labels, spec=spec):
                return batch_loss(lg, ft, roles, labels, spec)

            err = ad.grad_check(f, [logits, feats], epsilon=1e-5)
            assert err < 1e-4, f"{strategy}: gradient error {err:.3e}"

    def test_never_seen_rejected_everywhere(self):
        for strategy in Strategy:
            spec = LossSpec(strategy, 4)
            logits = ad.Tensor(np.zeros((1, spec.output_count)))
            feats = ad.Tensor(np.zeros((1, 8)))
            with pytest.raises(DatasetError, match="test-only"):
                batch_loss(logits, feats, np.array([NEVER]), np.array([-1]), spec)
