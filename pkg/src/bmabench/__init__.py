"""Approximate model averaging for small classifiers.

Builds ensembles of softmax classifiers four ways (independent inits, cyclic
restarts, constant-rate trajectory snapshots, and last-layer Bayesian
inference via mean-field VI or coreset-accelerated NUTS), averages their
predictive distributions, and scores the result with Brier score, accuracy,
and expected calibration error.
"""

from . import coresets, ensembles, harness, last_layer_vi, mcmc, metrics, nn_core
from .ensembles import EnsembleConfig, EnsembleMember, bma_predict
from .harness import ExperimentConfig, run_experiment, emit_report
from .metrics import PredictionSet, accuracy, brier, ece

__version__ = "0.1.0"

__all__ = [
    "coresets",
    "ensembles",
    "harness",
    "last_layer_vi",
    "mcmc",
    "metrics",
    "nn_core",
    "EnsembleConfig",
    "EnsembleMember",
    "bma_predict",
    "ExperimentConfig",
    "run_experiment",
    "emit_report",
    "PredictionSet",
    "accuracy",
    "brier",
    "ece",
]
