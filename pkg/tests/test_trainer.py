"""
Label-disjoint splits, the GAO step and per-task training
"""
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_spd_pair
from subspace_cl.config import TrainConfig
from subspace_cl.core.adapter import DualLoRALayer, anchor, frozen_checksum, random_branch
from subspace_cl.core.model import CosineClassifier
from subspace_cl.core.subspace import general_bases, isolated_bases
from subspace_cl.core.trainer import (
    ParamSet,
    TaskObjective,
    gao_step,
    gradient_cosine,
    learning_rate,
    sgd_step,
    split_label_disjoint,
    train_task,
)
from subspace_cl.exceptions import DimensionMismatchError, NonFiniteGradientError


def _quadratic_grad_fn(targets):
    """Loss 0.5 |theta - t_b|^2 per batch key b"""
    def grad_fn(params, batch):
        theta = params.flatten()
        diff = theta - targets[batch]
        return 0.5 * float(diff @ diff), diff
    return grad_fn


def _params(rng):
    return ParamSet({"B": rng.standard_normal((3, 2)), "C": rng.standard_normal(4)})


def _anchored_setup(rng, classes=(0, 1, 2), n=30):
    past, new = random_spd_pair(rng, 6)
    layer = DualLoRALayer.frozen(rng.standard_normal((5, 6)), w_G=0.5, rank=2)
    layer = anchor(layer, general_bases(past, new, 2), isolated_bases(past, new, 2))
    clf = CosineClassifier.empty(5)
    clf.add_classes(classes, rng)
    labels = np.asarray(classes)[np.arange(n) % len(classes)]
    means = 2.0 * rng.standard_normal((len(classes), 6))
    X = means[np.arange(n) % len(classes)] + 0.3 * rng.standard_normal((n, 6))
    return layer, clf, X, labels


class TestParamSet:
    def test_flatten_unflatten(self, rng):
        params = _params(rng)
        restored = params.unflatten(params.flatten())
        for name in params.tensors:
            np.testing.assert_array_equal(restored.tensors[name], params.tensors[name])

    def test_wrong_length(self, rng):
        with pytest.raises(DimensionMismatchError):
            _params(rng).unflatten(np.zeros(5))


class TestLabelSplit:
    def test_disjoint_labels_and_class_counts(self, rng):
        for k in range(2, 9):
            labels = rng.permutation(np.repeat(np.arange(k), 3))
            split = split_label_disjoint(labels, rng)
            first, second = set(labels[split.first]), set(labels[split.second])
            assert not first & second
            assert len(first) == math.ceil(k / 2)
            assert len(second) == k // 2
            assert sorted(np.concatenate([split.first, split.second])) == list(range(len(labels)))
            assert not split.degenerate

    def test_single_class_is_degenerate(self, rng):
        split = split_label_disjoint([4, 4, 4], rng)
        assert split.degenerate
        assert split.second.size == 0
        assert split.first.size == 3

    def test_empty_batch(self, rng):
        with pytest.raises(DimensionMismatchError):
            split_label_disjoint([], rng)


class TestGaoStep:
    def test_zero_rho_equals_two_sgd_steps(self, rng):
        for _ in range(20):
            params = _params(rng)
            targets = {"a": rng.standard_normal(10), "b": rng.standard_normal(10)}
            grad_fn = _quadratic_grad_fn(targets)
            eta = float(rng.uniform(0.01, 0.5))
            gao = gao_step(params, "a", "b", eta, 0.0, grad_fn)
            sgd = sgd_step(sgd_step(params, "a", eta, grad_fn), "b", eta, grad_fn)
            assert np.array_equal(gao.flatten(), sgd.flatten())

    def test_perturbation_moves_the_gradient_point(self, rng):
        params = _params(rng)
        targets = {"a": rng.standard_normal(10), "b": rng.standard_normal(10)}
        grad_fn = _quadratic_grad_fn(targets)
        plain = gao_step(params, "a", "b", 0.1, 0.0, grad_fn)
        perturbed = gao_step(params, "a", "b", 0.1, 0.2, grad_fn)
        assert not np.allclose(plain.flatten(), perturbed.flatten())

    def test_first_phase_gradient_taken_at_perturbed_point(self, rng):
        params = _params(rng)
        theta = params.flatten()
        targets = {"a": rng.standard_normal(10), "b": rng.standard_normal(10)}
        grad_fn = _quadratic_grad_fn(targets)
        eta, rho = 0.1, 0.3
        g2 = theta - targets["b"]
        perturbed = theta - rho * g2 / (g2 @ g2)
        theta_plus = theta - eta * (perturbed - targets["a"])
        g1_plus = theta_plus - targets["a"]
        perturbed_plus = theta_plus - rho * g1_plus / (g1_plus @ g1_plus)
        expected = theta_plus - eta * (perturbed_plus - targets["b"])
        np.testing.assert_allclose(gao_step(params, "a", "b", eta, rho, grad_fn).flatten(), expected, atol=1e-12)

    def test_zero_gradient_skips_perturbation(self, rng):
        params = _params(rng)
        theta = params.flatten()
        # Batch "b" sits at its minimum, so its gradient is exactly zero
        targets = {"a": rng.standard_normal(10), "b": theta.copy()}
        grad_fn = _quadratic_grad_fn(targets)
        result = gao_step(params, "a", "b", 0.1, 0.5, grad_fn).flatten()
        assert np.all(np.isfinite(result))
        theta_plus = theta - 0.1 * (theta - targets["a"])
        g1_plus = theta_plus - targets["a"]
        perturbed_plus = theta_plus - 0.5 * g1_plus / (g1_plus @ g1_plus)
        np.testing.assert_allclose(result, theta_plus - 0.1 * (perturbed_plus - targets["b"]), atol=1e-12)

    def test_non_finite_gradient(self, rng):
        def grad_fn(params, batch):
            grad = np.zeros_like(params.flatten())
            grad[0] = np.nan
            return 0.0, grad

        with pytest.raises(NonFiniteGradientError) as info:
            gao_step(_params(rng), "a", "b", 0.1, 0.2, grad_fn)
        assert info.value.diagnostics["nan_count"] == 1


class TestSchedule:
    def test_cosine_annealing(self):
        cfg = TrainConfig(eta=0.2)
        assert learning_rate(cfg, 0, 10) == pytest.approx(0.2)
        assert learning_rate(cfg, 5, 10) == pytest.approx(0.1)
        assert learning_rate(cfg, 10, 10) == pytest.approx(0.0, abs=1e-15)

    def test_constant(self):
        cfg = TrainConfig(eta=0.2, schedule="constant")
        assert learning_rate(cfg, 7, 10) == 0.2

    def test_gao_needs_two_samples_per_batch(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)

    def test_gradient_cosine(self):
        assert gradient_cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
        assert gradient_cosine(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)
        assert gradient_cosine(np.zeros(2), np.ones(2)) == 0.0


class TestTrainTask:
    def test_trains_up_projections_only(self, rng):
        layer, clf, X, labels = _anchored_setup(rng)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
        result = train_task(layer, clf, X, labels, [0, 1, 2], cfg)
        assert frozen_checksum(result.layer) == frozen_checksum(layer)
        np.testing.assert_array_equal(result.layer.general.A, layer.general.A)
        assert np.any(result.layer.general.B)
        assert np.any(result.layer.isolated.B)
        assert not np.array_equal(result.classifier.prototypes, clf.prototypes)
        assert len(result.log.steps) == 2 * math.ceil(30 / 8)
        assert list(result.log.epoch_summary()["epoch"]) == [0, 1]

    def test_deterministic(self, rng):
        layer, clf, X, labels = _anchored_setup(rng)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=5)
        first = train_task(layer, clf, X, labels, [0, 1, 2], cfg)
        second = train_task(layer, clf, X, labels, [0, 1, 2], cfg)
        np.testing.assert_array_equal(first.layer.general.B, second.layer.general.B)
        np.testing.assert_array_equal(first.classifier.prototypes, second.classifier.prototypes)

    def test_loss_decreases(self, rng):
        layer, clf, X, labels = _anchored_setup(rng, n=60)
        cfg = TrainConfig(epochs=10, batch_size=20, seed=0)
        summary = train_task(layer, clf, X, labels, [0, 1, 2], cfg).log.epoch_summary()
        assert summary["loss"].iloc[-1] < summary["loss"].iloc[0]

    def test_rho_drawn_within_range(self, rng):
        layer, clf, X, labels = _anchored_setup(rng, n=60)
        cfg = TrainConfig(epochs=3, batch_size=12, rho_max=0.7, seed=2)
        frame = train_task(layer, clf, X, labels, [0, 1, 2], cfg).log.to_frame()
        assert frame["rho"].between(0.0, cfg.rho_max).all()
        assert frame["rho"].max() > 0.0

    def test_single_class_task_falls_back_to_sgd(self, rng):
        layer, clf, X, labels = _anchored_setup(rng, classes=(7,), n=10)
        result = train_task(layer, clf, X, labels, [7], TrainConfig(epochs=1, batch_size=4))
        frame = result.log.to_frame()
        assert frame["degenerate"].all()
        assert (frame["rho"] == 0.0).all()

    def test_sgd_optimizer_logs_gradient_cosine(self, rng):
        layer, clf, X, labels = _anchored_setup(rng)
        result = train_task(layer, clf, X, labels, [0, 1, 2], TrainConfig(epochs=1, batch_size=10, optimizer="sgd"))
        frame = result.log.to_frame()
        assert frame["grad_cosine"].between(-1.0, 1.0).all()
        assert (frame["rho"] == 0.0).all()

    def test_trainable_down_projection(self, rng):
        layer = DualLoRALayer.frozen(rng.standard_normal((5, 6)), w_G=1.0, rank=2)
        layer = replace(layer, general=random_branch(layer, rng))
        clf = CosineClassifier.empty(5)
        clf.add_classes([0, 1], rng)
        X = rng.standard_normal((12, 6))
        labels = np.arange(12) % 2
        objective = TaskObjective(layer, clf, X, labels, [0, 1])
        assert "A_G" in objective.initial_params().tensors
        result = train_task(layer, clf, X, labels, [0, 1], TrainConfig(epochs=1, batch_size=6, optimizer="sgd"))
        assert not np.array_equal(result.layer.general.A, layer.general.A)

    def test_mismatched_rows(self, rng):
        layer, clf, X, labels = _anchored_setup(rng)
        with pytest.raises(DimensionMismatchError):
            train_task(layer, clf, X[:5], labels, [0, 1, 2], TrainConfig())
