"""Proper-scoring and calibration metrics for probabilistic classifiers.

All functions are pure and operate on a validated ``PredictionSet``. The
Brier score uses the multi-class sum-over-classes form (range [0, 2]), not
the halved variant. ECE bins confidence (the max predicted probability) into
equal-width right-closed bins on (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .exceptions import DimensionError, ValidationError

ROW_SUM_TOL = 1e-6

__all__ = ["PredictionSet", "MetricsCurve", "brier", "accuracy", "ece", "aggregate_runs"]


@dataclass(frozen=True)
class PredictionSet:
    """N x C probability matrix plus integer labels in [0, C)."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        y = np.asarray(self.labels)
        if p.ndim != 2:
            raise DimensionError("probs must be a 2-D (N, C) matrix")
        if y.shape != (p.shape[0],):
            raise DimensionError("labels must be one index per probability row")
        if p.shape[0] == 0:
            raise ValidationError("prediction set must be nonempty")
        if np.any(p < 0):
            raise ValidationError("probabilities must be nonnegative")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValidationError(f"probability rows must sum to 1 within {ROW_SUM_TOL}")
        if y.min() < 0 or y.max() >= p.shape[1]:
            raise ValidationError(f"labels must lie in [0, {p.shape[1]})")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.probs.shape[0]


def brier(ps: PredictionSet) -> float:
    """Mean over items of the summed squared gap to the one-hot label row."""
    onehot = np.zeros_like(ps.probs)
    onehot[np.arange(len(ps)), ps.labels] = 1.0
    return float(((onehot - ps.probs) ** 2).sum(axis=1).mean())


def accuracy(ps: PredictionSet) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the lowest class."""
    return float((ps.probs.argmax(axis=1) == ps.labels).mean())


def ece(ps: PredictionSet, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins on (0, 1]."""
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    conf = ps.probs.max(axis=1)
    correct = (ps.probs.argmax(axis=1) == ps.labels).astype(np.float64)
    # right-closed bins: conf in ((b-1)/n_bins, b/n_bins] lands in bin b-1
    bins = np.ceil(conf * n_bins).astype(np.int64) - 1
    bins = np.clip(bins, 0, n_bins - 1)
    total = 0.0
    n = len(ps)
    for b in range(n_bins):
        mask = bins == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        total += (cnt / n) * gap
    return float(total)


@dataclass(frozen=True)
class MetricsCurve:
    """Per-ensemble-size mean and sample std of each metric across runs."""

    method: str
    sizes: np.ndarray
    means: Mapping[str, np.ndarray]
    stds: Mapping[str, np.ndarray]
    n_runs: int


def aggregate_runs(method: str, per_run: Mapping[str, np.ndarray]) -> MetricsCurve:
    """Collapse (runs x ensemble sizes) metric grids to mean/std curves.

    ``per_run`` maps metric name -> array of shape (R, M) where row r holds
    that run's values at ensemble sizes 1..M. Sample std uses divisor R-1 and
    is 0 when R == 1.
    """
    if not per_run:
        raise ValidationError("per_run must contain at least one metric")
    arrays = {}
    shape = None
    for name, vals in per_run.items():
        a = np.asarray(vals, dtype=np.float64)
        if a.ndim != 2:
            raise ValidationError(f"metric {name!r}: expected a (runs, sizes) grid")
        if shape is None:
            shape = a.shape
        elif a.shape != shape:
            raise ValidationError("ragged input: metric grids disagree on shape")
        arrays[name] = a
    r, m = shape
    if r < 1:
        raise ValidationError("need at least one run")
    means = {k: a.mean(axis=0) for k, a in arrays.items()}
    if r == 1:
        stds = {k: np.zeros(m) for k in arrays}
    else:
        stds = {k: a.std(axis=0, ddof=1) for k, a in arrays.items()}
    return MetricsCurve(method, np.arange(1, m + 1), means, stds, r)
