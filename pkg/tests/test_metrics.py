"""Metric oracles and properties: Brier, accuracy, ECE, aggregation."""

import numpy as np
import pytest

from bmabench import metrics as mx
from bmabench.exceptions import ValidationError


# --- independent direct-formula implementations (kept deliberately naive) ---


def brier_by_loops(probs, labels):
    n, c = probs.shape
    total = 0.0
    for i in range(n):
        for j in range(c):
            y = 1.0 if labels[i] == j else 0.0
            total += (y - probs[i, j]) ** 2
    return total / n


def accuracy_by_loops(probs, labels):
    hits = 0
    for i in range(len(labels)):
        best, best_j = -1.0, -1
        for j in range(probs.shape[1]):
            if probs[i, j] > best:  # strict > keeps the lowest index on ties
                best, best_j = probs[i, j], j
        hits += best_j == labels[i]
    return hits / len(labels)


def ece_by_loops(probs, labels, n_bins):
    n = len(labels)
    conf = [max(row) for row in probs]
    pred = [int(np.argmax(row)) for row in probs]
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        # right-closed bins; anything at or below the first edge joins bin 0
        if b == 0:
            idx = [i for i in range(n) if conf[i] <= hi]
        else:
            idx = [i for i in range(n) if lo < conf[i] <= hi]
        if not idx:
            continue
        acc = sum(pred[i] == labels[i] for i in idx) / len(idx)
        avg_conf = sum(conf[i] for i in idx) / len(idx)
        total += len(idx) / n * abs(acc - avg_conf)
    return total


def random_prediction_set(rng, n=None, c=None):
    n = n or int(rng.integers(2, 40))
    c = c or int(rng.integers(2, 8))
    logits = rng.normal(size=(n, c)) * rng.uniform(0.5, 3.0)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, c, n)
    return mx.PredictionSet(probs, labels)


class TestBrier:
    def test_perfect_one_hot_is_zero(self):
        probs = np.eye(4)[[0, 1, 2, 3]]
        assert mx.brier(mx.PredictionSet(probs, np.arange(4))) == 0.0

    def test_uniform_ten_classes(self):
        probs = np.full((5, 10), 0.1)
        assert mx.brier(mx.PredictionSet(probs, np.zeros(5, dtype=int))) == pytest.approx(0.9, abs=1e-12)

    def test_two_item_example(self):
        probs = np.array([[0.8, 0.2], [0.3, 0.7]])
        labels = np.array([0, 1])
        ps = mx.PredictionSet(probs, labels)
        assert brier_by_loops(probs, labels) == pytest.approx(0.13, abs=1e-12)
        assert mx.brier(ps) == pytest.approx(0.13, abs=1e-12)

    def test_row_sum_violation_rejected(self):
        with pytest.raises(ValidationError):
            mx.PredictionSet(np.array([[0.5, 0.4]]), np.array([0]))


class TestAccuracy:
    def test_extremes(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        assert mx.accuracy(mx.PredictionSet(probs, np.array([0, 1]))) == 1.0
        assert mx.accuracy(mx.PredictionSet(probs, np.array([1, 0]))) == 0.0

    def test_tie_breaks_to_lowest_class(self):
        probs = np.array([[0.5, 0.5]])
        assert mx.accuracy(mx.PredictionSet(probs, np.array([0]))) == 1.0
        assert mx.accuracy(mx.PredictionSet(probs, np.array([1]))) == 0.0


class TestEce:
    def test_confident_and_correct_is_zero(self):
        probs = np.eye(3)[[0, 1, 2]]
        assert mx.ece(mx.PredictionSet(probs, np.arange(3))) == 0.0

    def test_single_overconfident_item(self):
        probs = np.array([[0.9, 0.1]])
        assert mx.ece(mx.PredictionSet(probs, np.array([1])), n_bins=1) == pytest.approx(0.9, abs=1e-12)

    def test_perfectly_calibrated_population(self):
        rng = np.random.default_rng(0)
        n = 10_000
        conf = rng.uniform(0.55, 0.95, n)
        correct = rng.random(n) < conf
        probs = np.stack([conf, 1 - conf], axis=1)
        labels = np.where(correct, 0, 1)
        assert mx.ece(mx.PredictionSet(probs, labels)) < 0.02

    def test_bad_bin_count(self):
        ps = mx.PredictionSet(np.array([[0.6, 0.4]]), np.array([0]))
        with pytest.raises(ValidationError):
            mx.ece(ps, n_bins=0)


class TestAgainstDirectFormulas:
    def test_hundred_random_sets_match_exactly(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            ps = random_prediction_set(rng)
            assert abs(mx.brier(ps) - brier_by_loops(ps.probs, ps.labels)) <= 1e-12
            assert abs(mx.accuracy(ps) - accuracy_by_loops(ps.probs, ps.labels)) <= 1e-12
            bins = int(rng.integers(1, 25))
            assert abs(mx.ece(ps, bins) - ece_by_loops(ps.probs, ps.labels, bins)) <= 1e-12


class TestProperties:
    def test_metric_ranges(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            ps = random_prediction_set(rng)
            assert 0.0 <= mx.brier(ps) <= 2.0
            assert 0.0 <= mx.accuracy(ps) <= 1.0
            assert 0.0 <= mx.ece(ps) <= 1.0

    def test_brier_minimized_at_one_hot(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 3, 10)
        onehot = np.eye(3)[labels]
        base = mx.brier(mx.PredictionSet(onehot, labels))
        for _ in range(10):
            # random perturbation toward another valid row increases brier
            other = rng.dirichlet(np.ones(3), size=10)
            mixed = 0.9 * onehot + 0.1 * other
            assert mx.brier(mx.PredictionSet(mixed, labels)) > base

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        ps = random_prediction_set(rng, n=30)
        perm = rng.permutation(30)
        shuffled = mx.PredictionSet(ps.probs[perm], ps.labels[perm])
        assert mx.brier(ps) == pytest.approx(mx.brier(shuffled), abs=1e-12)
        assert mx.accuracy(ps) == mx.accuracy(shuffled)
        assert mx.ece(ps) == pytest.approx(mx.ece(shuffled), abs=1e-12)


class TestAggregateRuns:
    def test_single_run_has_zero_std(self):
        curve = mx.aggregate_runs("sgd", {"brier": np.array([[0.5, 0.4, 0.3]])})
        np.testing.assert_array_equal(curve.stds["brier"], 0.0)
        np.testing.assert_array_equal(curve.sizes, [1, 2, 3])

    def test_hand_computed_mean_and_std(self):
        values = np.array([[0.1], [0.2], [0.3]])
        curve = mx.aggregate_runs("sgd", {"brier": values})
        assert curve.means["brier"][0] == pytest.approx(0.2, abs=1e-15)
        assert curve.stds["brier"][0] == pytest.approx(0.1, abs=1e-12)

    def test_run_order_irrelevant(self):
        rng = np.random.default_rng(5)
        grid = rng.random((4, 6))
        a = mx.aggregate_runs("m", {"ece": grid})
        b = mx.aggregate_runs("m", {"ece": grid[::-1]})
        np.testing.assert_allclose(a.means["ece"], b.means["ece"], atol=1e-15)
        np.testing.assert_allclose(a.stds["ece"], b.stds["ece"], atol=1e-15)

    def test_ragged_rejected(self):
        with pytest.raises(ValidationError):
            mx.aggregate_runs("m", {"a": np.zeros((2, 3)), "b": np.zeros((2, 4))})
