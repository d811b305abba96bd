"""
Feature extractor, cosine classifier and the cross-entropy gradients
"""
import numpy as np
import pytest

from subspace_cl.core.model import CosineClassifier, FeatureExtractor, ce_loss_and_grads, extract, logits
from subspace_cl.exceptions import ConfigError, DimensionMismatchError


def _classifier(rng, d_out=5, classes=(0, 1, 2, 3)):
    clf = CosineClassifier.empty(d_out)
    clf.add_classes(classes, rng)
    return clf


def _numeric_grad(f, value, h=1e-6):
    grad = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        plus = value.copy()
        minus = value.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
    return grad


class TestFeatureExtractor:
    def test_deterministic_and_nonnegative(self, rng):
        raw = rng.standard_normal((4, 6))
        first = extract(FeatureExtractor.from_seed(6, 9, seed=3), raw)
        second = extract(FeatureExtractor.from_seed(6, 9, seed=3), raw)
        assert first.shape == (4, 9)
        assert np.all(first >= 0)
        np.testing.assert_array_equal(first, second)

    def test_raw_width_checked(self, rng):
        with pytest.raises(DimensionMismatchError):
            extract(FeatureExtractor.from_seed(6, 9, seed=0), rng.standard_normal((2, 5)))

    def test_decay_scales_projection_rows(self):
        flat = FeatureExtractor.from_seed(6, 4, seed=5)
        decayed = FeatureExtractor.from_seed(6, 4, seed=5, decay=0.5)
        np.testing.assert_allclose(decayed.P, flat.P * np.array([1.0, 0.5, 0.25, 0.125])[:, None])


class TestCosineClassifier:
    def test_logits_bounded_by_temperature(self, rng):
        clf = _classifier(rng)
        z = logits(clf, rng.standard_normal((10, 5)))
        assert np.all(np.abs(z) <= clf.temperature + 1e-12)

    def test_logits_invariant_to_feature_scale(self, rng):
        clf = _classifier(rng)
        Y = rng.standard_normal((8, 5))
        base = logits(clf, Y)
        for c in (0.01, 3.0, 1e4):
            np.testing.assert_allclose(logits(clf, c * Y), base, atol=1e-10)

    def test_zero_feature_row_gives_zero_logits(self, rng):
        clf = _classifier(rng)
        np.testing.assert_array_equal(logits(clf, np.zeros((1, 5))), np.zeros((1, 4)))

    def test_prototype_direction_is_predicted(self, rng):
        clf = _classifier(rng)
        Y = 3.0 * clf.prototypes[[2, 0]]
        np.testing.assert_array_equal(clf.predict(Y), [2, 0])

    def test_predict_restricted_to_given_classes(self, rng):
        clf = _classifier(rng)
        Y = clf.prototypes[[1]]
        assert clf.predict(Y, class_ids=[2, 3])[0] in (2, 3)

    def test_registry_appends(self, rng):
        clf = _classifier(rng, classes=(4, 5))
        clf.add_classes([9], rng)
        assert clf.class_ids == [4, 5, 9]
        np.testing.assert_allclose(np.linalg.norm(clf.prototypes, axis=1), 1.0)

    def test_duplicate_classes(self, rng):
        clf = _classifier(rng)
        with pytest.raises(ConfigError):
            clf.add_classes([1], rng)

    def test_non_positive_temperature(self):
        with pytest.raises(ConfigError):
            CosineClassifier.empty(3, temperature=0.0)


class TestCrossEntropy:
    def test_gradients_match_finite_differences(self, rng):
        for _ in range(50):
            d_out = int(rng.integers(2, 7))
            clf = _classifier(rng, d_out=d_out, classes=(0, 1, 2, 3))
            clf.temperature = float(rng.uniform(1.0, 16.0))
            Y = rng.standard_normal((6, d_out))
            labels = rng.choice([0, 1, 2, 3], size=6)
            mask = [0, 1, 2, 3]
            _, dY, dC = ce_loss_and_grads(clf, Y, labels, mask)

            def loss_of_Y(value):
                return ce_loss_and_grads(clf, value, labels, mask)[0]

            def loss_of_C(value):
                candidate = CosineClassifier(prototypes=value, temperature=clf.temperature,
                                             class_registry=dict(clf.class_registry))
                return ce_loss_and_grads(candidate, Y, labels, mask)[0]

            np.testing.assert_allclose(dY, _numeric_grad(loss_of_Y, Y), rtol=1e-5, atol=1e-8)
            np.testing.assert_allclose(dC, _numeric_grad(loss_of_C, clf.prototypes), rtol=1e-5, atol=1e-8)

    def test_rows_outside_mask_get_no_gradient(self, rng):
        clf = _classifier(rng)
        Y = rng.standard_normal((5, 5))
        _, _, dC = ce_loss_and_grads(clf, Y, [2, 3, 2, 3, 3], [2, 3])
        np.testing.assert_array_equal(dC[clf.columns([0, 1])], 0.0)
        assert np.any(dC[clf.columns([2, 3])])

    def test_uniform_logits_loss(self, rng):
        clf = _classifier(rng)
        loss, _, _ = ce_loss_and_grads(clf, np.zeros((3, 5)), [0, 1, 2], [0, 1, 2, 3])
        assert loss == pytest.approx(np.log(4))

    def test_label_outside_mask(self, rng):
        clf = _classifier(rng)
        with pytest.raises(DimensionMismatchError):
            ce_loss_and_grads(clf, rng.standard_normal((2, 5)), [0, 3], [0, 1])

    def test_unregistered_class(self, rng):
        clf = _classifier(rng)
        with pytest.raises(DimensionMismatchError):
            ce_loss_and_grads(clf, rng.standard_normal((1, 5)), [7], [7])
