"""Mean-field Gaussian variational inference over the softmax output layer.

The backbone stays frozen at its SGD solution; inference runs on the flat
last-layer parameter vector theta of length (F + 1) * C, laid out as the
(F, C) weight matrix row-major followed by the C biases — the same layout
the dense layer uses inside the flat network weight vector.

The log-likelihood helpers here (``head_log_probs``, ``head_loglik``, ...)
are shared with the coreset and MCMC modules, which weight and sample the
same per-example terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .container import POSTERIOR_MAGIC, read_container, write_container
from .exceptions import DimensionError, NumericalError, ValidationError

__all__ = [
    "GaussianPosterior",
    "PriorSpec",
    "extract_features",
    "head_log_probs",
    "head_loglik",
    "head_loglik_grad",
    "kl_to_prior",
    "elbo_and_grad",
    "fit_vi",
    "sample_last_layer",
    "save_posterior",
    "load_posterior",
]

INIT_LOG_STD = float(np.log(0.05))


@dataclass(frozen=True)
class GaussianPosterior:
    """Diagonal Gaussian over last-layer parameters."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.log_std, dtype=np.float64)
        if m.ndim != 1 or m.shape != s.shape:
            raise DimensionError("mean and log_std must be matching 1-D vectors")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise ValidationError("posterior parameters must be finite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "log_std", s)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior, shared between VI and MCMC."""

    std: float = 1.0

    def __post_init__(self):
        if self.std <= 0:
            raise ValidationError("prior std must be positive")


def extract_features(net: nn_core.Network, inputs: np.ndarray) -> np.ndarray:
    """Penultimate activations (post-ReLU in the default architectures)."""
    return nn_core.penultimate_features(net, inputs)


# ---------------------------------------------------------------------------
# Softmax-head likelihood
# ---------------------------------------------------------------------------


def _unpack_theta(theta: np.ndarray, n_features: int):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size % (n_features + 1) != 0:
        raise DimensionError(f"theta length {theta.size} does not factor as (F+1)*C with F={n_features}")
    n_classes = theta.size // (n_features + 1)
    w = theta[: n_features * n_classes].reshape(n_features, n_classes)
    b = theta[n_features * n_classes :]
    return w, b


def head_log_probs(theta: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Row-wise log softmax of features @ W + b, shape (N, C)."""
    features = np.asarray(features, dtype=np.float64)
    w, b = _unpack_theta(theta, features.shape[1])
    logits = features @ w + b
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def head_loglik(theta: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example log-likelihood log p(y_n | x_n, theta), shape (N,)."""
    logp = head_log_probs(theta, features)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logp.shape[1]:
        raise ValidationError(f"labels must lie in [0, {logp.shape[1]})")
    return logp[np.arange(labels.size), labels]


def head_loglik_grad(
    theta: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """(Weighted) sum of per-example log-likelihoods and its theta-gradient."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    logp = head_log_probs(theta, features)
    probs = np.exp(logp)
    ll = logp[np.arange(labels.size), labels]
    resid = -probs
    resid[np.arange(labels.size), labels] += 1.0  # (onehot - p) rows
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        value = float(weights @ ll)
        resid = resid * weights[:, None]
    else:
        value = float(ll.sum())
    gw = features.T @ resid
    gb = resid.sum(axis=0)
    return value, np.concatenate([gw.ravel(), gb])


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


def kl_to_prior(q: GaussianPosterior, prior: PriorSpec) -> float:
    """Closed-form KL(q || isotropic prior); zero iff q equals the prior."""
    var = np.exp(2.0 * q.log_std)
    s2 = prior.std ** 2
    terms = np.log(prior.std) - q.log_std + (var + q.mean ** 2) / (2.0 * s2) - 0.5
    return float(terms.sum())


def elbo_and_grad(
    q: GaussianPosterior,
    prior: PriorSpec,
    features: np.ndarray,
    labels: np.ndarray,
    n_mc: int = 1,
    full_n: int | None = None,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Reparameterized ELBO estimate and its gradient in the q parameters.

    The likelihood term is rescaled by full_n / batch_size so minibatch
    estimates stay unbiased for the full-data ELBO. The returned gradient is
    the concatenation [d/d mean, d/d log_std], length 2 * q.dim.

    ``noise`` fixes the standard-normal draws (shape (n_mc, dim)) for
    common-random-number comparisons; otherwise they come from ``rng``.
    """
    if n_mc < 1:
        raise ValidationError("n_mc must be >= 1")
    labels = np.asarray(labels)
    batch = labels.size
    if batch == 0:
        raise ValidationError("empty batch")
    scale = (full_n if full_n is not None else batch) / batch

    if noise is None:
        if rng is None:
            raise ValidationError("provide rng or explicit noise")
        noise = rng.standard_normal((n_mc, q.dim))
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (n_mc, q.dim):
            raise DimensionError(f"noise must have shape ({n_mc}, {q.dim})")

    std = q.std
    loglik = 0.0
    g_theta_mean = np.zeros(q.dim)
    g_theta_logstd = np.zeros(q.dim)
    for eps in noise:
        theta = q.mean + std * eps
        value, g = head_loglik_grad(theta, features, labels)
        loglik += value
        g_theta_mean += g
        g_theta_logstd += g * eps * std
    loglik /= n_mc
    g_theta_mean /= n_mc
    g_theta_logstd /= n_mc

    s2 = prior.std ** 2
    kl = kl_to_prior(q, prior)
    g_mean = scale * g_theta_mean - q.mean / s2
    g_logstd = scale * g_theta_logstd - (np.exp(2.0 * q.log_std) / s2 - 1.0)
    elbo = scale * loglik - kl
    return float(elbo), np.concatenate([g_mean, g_logstd])


def fit_vi(
    features: np.ndarray,
    labels: np.ndarray,
    prior: PriorSpec,
    init_mean: np.ndarray,
    steps: int = 5000,
    rate: float = 1e-3,
    seed: int = 0,
    n_mc: int = 1,
    batch_size: int | None = None,
) -> tuple[GaussianPosterior, np.ndarray]:
    """Gradient-ascent ELBO fit; returns (posterior, per-step ELBO trace).

    Starts from mean = init_mean (the SGD last-layer weights) and
    log_std = log 0.05. Plain SGD at a fixed rate; deterministic given seed.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.size
    rng = np.random.default_rng(seed)

    mean = np.asarray(init_mean, dtype=np.float64).copy()
    log_std = np.full(mean.size, INIT_LOG_STD)
    trace = np.empty(steps)
    for step in range(steps):
        if batch_size is not None and batch_size < n:
            idx = rng.choice(n, size=batch_size, replace=False)
            fb, yb = features[idx], labels[idx]
        else:
            fb, yb = features, labels
        q = GaussianPosterior(mean, log_std)
        elbo, g = elbo_and_grad(q, prior, fb, yb, n_mc=n_mc, full_n=n, rng=rng)
        if not np.isfinite(elbo) or not np.all(np.isfinite(g)):
            raise NumericalError(f"ELBO became non-finite at step {step}")
        mean = mean + rate * g[: mean.size]
        log_std = log_std + rate * g[mean.size :]
        trace[step] = elbo
    return GaussianPosterior(mean, log_std), trace


def sample_last_layer(q: GaussianPosterior, n_samples: int, seed: int) -> np.ndarray:
    """(n_samples, dim) i.i.d. draws from q; deterministic given seed."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, q.dim))
    return q.mean + q.std * eps


def save_posterior(path, q: GaussianPosterior) -> None:
    write_container(path, POSTERIOR_MAGIC, [q.mean, q.log_std])


def load_posterior(path) -> GaussianPosterior:
    _, tensors, _ = read_container(path, POSTERIOR_MAGIC)
    if len(tensors) != 2:
        raise ValidationError(f"{path}: posterior file must hold mean and log_std")
    return GaussianPosterior(tensors[0].astype(np.float64), tensors[1].astype(np.float64))
