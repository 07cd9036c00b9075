"""Sparse data-weight coresets for the last-layer likelihood.

Per-datum log-likelihood functions are projected to finite vectors by
evaluating them at draws from a weighting posterior (centering each row by
its mean and scaling by 1/sqrt(S), so row dot products are Monte-Carlo
covariance estimates). Greedy geodesic selection then picks up to a capped
number of rows whose weighted sum aligns with the full-data sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DegenerateInputError,
    DimensionError,
    NumericalError,
    ValidationError,
)
from .last_layer_vi import GaussianPosterior, head_loglik, head_loglik_grad, sample_last_layer

__all__ = [
    "ProjectedLikelihood",
    "Coreset",
    "center_rows",
    "project_loglik",
    "build_coreset",
    "weighted_loglik_and_grad",
    "save_coreset",
    "load_coreset",
]


@dataclass(frozen=True)
class ProjectedLikelihood:
    """(N, S) matrix of centered, 1/sqrt(S)-scaled log-likelihood evaluations."""

    vectors: np.ndarray
    draw_seed: int

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < 2:
            raise ValidationError("projection needs an (N, S) matrix with S >= 2")
        if not np.all(np.isfinite(v)):
            raise ValidationError("projection vectors must be finite")
        object.__setattr__(self, "vectors", v)

    @property
    def n_data(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_draws(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Coreset:
    """Sparse nonnegative data weights; at most ``max_size`` indices carry mass."""

    indices: np.ndarray
    weights: np.ndarray
    n_data: int
    max_size: int
    residual_trace: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.shape != w.shape or idx.ndim != 1:
            raise DimensionError("indices and weights must be matching 1-D vectors")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_data):
            raise ValidationError("coreset indices out of dataset bounds")
        if idx.size != np.unique(idx).size:
            raise ValidationError("coreset indices must be distinct")
        if np.any(w <= 0):
            raise ValidationError("selected coreset weights must be strictly positive")
        if idx.size > self.max_size:
            raise ValidationError(f"{idx.size} selected indices exceed the cap {self.max_size}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.indices.size


def center_rows(values: np.ndarray) -> np.ndarray:
    """Subtract each row's mean and scale by 1/sqrt(S).

    After this, row_i . row_j is the Monte-Carlo estimate of the covariance
    of the two underlying functions under the draw distribution.
    """
    values = np.asarray(values, dtype=np.float64)
    s = values.shape[1]
    return (values - values.mean(axis=1, keepdims=True)) / np.sqrt(s)


def project_loglik(
    features: np.ndarray,
    labels: np.ndarray,
    pi: GaussianPosterior,
    n_draws: int = 500,
    seed: int = 0,
    chunk: int = 64,
) -> ProjectedLikelihood:
    """Evaluate every datum's log-likelihood at ``n_draws`` samples from pi.

    Row n holds (l_n(theta_s) - mean_s l_n(theta_s)) / sqrt(S). Deterministic
    given the seed; draws are chunked so the (N, S) matrix is the only large
    allocation.
    """
    if n_draws < 2:
        raise ValidationError("n_draws must be >= 2")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if pi.dim % (features.shape[1] + 1) != 0:
        raise DimensionError("posterior dimension does not match feature dim / class count")
    draws = sample_last_layer(pi, n_draws, seed)
    n = labels.size
    values = np.empty((n, n_draws))
    for start in range(0, n_draws, chunk):
        for s in range(start, min(start + chunk, n_draws)):
            values[:, s] = head_loglik(draws[s], features, labels)
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0][0])
        raise NumericalError(f"non-finite log-likelihood for datum {bad}")
    return ProjectedLikelihood(center_rows(values), seed)


def build_coreset(
    proj: ProjectedLikelihood,
    max_size: int,
    max_iters: int | None = None,
    tol: float = 1e-9,
) -> Coreset:
    """Greedy geodesic selection of sparse weights aligning sum(w_n u_n) with sum(u_n).

    Works on the unit sphere: atoms and the target are normalized, each
    iteration moves the current iterate along the geodesic toward the best
    aligned atom, and the final weights are rescaled so the weighted sum is
    the optimal projection of the full sum. Iterations may revisit an
    already-selected atom (weight refinement); the cap counts distinct
    indices. Per-iteration residual error is nonincreasing by construction.
    """
    if max_size < 1:
        raise ValidationError("max_size must be >= 1")
    u = proj.vectors
    n = u.shape[0]
    norms = np.linalg.norm(u, axis=1)
    active = norms > 0
    if not np.any(active):
        raise DegenerateInputError("all projection rows have zero norm")
    total = u.sum(axis=0)
    total_norm = np.linalg.norm(total)
    if total_norm == 0:
        raise DegenerateInputError("projected likelihood sums to the zero vector")

    atoms = np.zeros_like(u)
    atoms[active] = u[active] / norms[active, None]
    target = total / total_norm
    t_dot_atoms = atoms @ target  # <target, atom_n>, zero rows excluded via `active`

    if max_iters is None:
        max_iters = max(10 * max_size, 100)

    alpha = np.zeros(n)
    y = np.zeros(u.shape[1])
    selected: set[int] = set()
    trace = []
    prev_residual = np.inf
    for _ in range(max_iters):
        if not selected:
            scores = np.where(active, t_dot_atoms, -np.inf)
            pick = int(np.argmax(scores))
            y = atoms[pick].copy()
            alpha[pick] = 1.0
            selected.add(pick)
            residual = float(np.linalg.norm(target - y))
            trace.append(residual)
            prev_residual = residual
            continue

        a = float(target @ y)
        d = target - a * y
        d_norm = np.linalg.norm(d)
        if d_norm < tol:
            break
        d /= d_norm

        c = atoms @ y  # <atom_n, y>
        x = atoms - c[:, None] * y
        x_norm = np.linalg.norm(x, axis=1)
        ok = active & (x_norm > 0)
        if max_size - len(selected) <= 0:
            mask = np.zeros(n, dtype=bool)
            mask[list(selected)] = True
            ok &= mask
        if not np.any(ok):
            break
        scores = np.full(n, -np.inf)
        scores[ok] = (x[ok] @ d) / x_norm[ok]
        pick = int(np.argmax(scores))
        if scores[pick] <= 0:
            break

        b = float(t_dot_atoms[pick])
        cp = float(c[pick])
        denom = (b - a * cp) + (a - b * cp)
        if denom <= 0:
            break
        gamma = min(max((b - a * cp) / denom, 0.0), 1.0)
        if gamma == 0.0:
            break
        y_new = (1.0 - gamma) * y + gamma * atoms[pick]
        nu = np.linalg.norm(y_new)
        if nu == 0:
            break
        y = y_new / nu
        alpha *= (1.0 - gamma) / nu
        alpha[pick] += gamma / nu
        selected.add(pick)

        residual = float(np.linalg.norm(target - y))
        trace.append(residual)
        if prev_residual - residual < 1e-14:
            break
        prev_residual = residual

    # scale back to the original (unnormalized) atoms: sum w_n u_n = <L, y> y
    beta = float(total @ y)
    weights_full = np.zeros(n)
    nz = alpha > 0
    weights_full[nz] = alpha[nz] * beta / norms[nz]
    keep = weights_full > 0
    indices = np.flatnonzero(keep)
    return Coreset(
        indices=indices,
        weights=weights_full[keep],
        n_data=n,
        max_size=max_size,
        residual_trace=np.asarray(trace),
    )


def weighted_loglik_and_grad(
    coreset: Coreset,
    features: np.ndarray,
    labels: np.ndarray,
    theta: np.ndarray,
) -> tuple[float, np.ndarray]:
    """sum_n w_n log p(y_n | x_n, theta) over the coreset, plus its theta-gradient."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if coreset.n_data != labels.size:
        raise ValidationError("coreset was built for a different dataset size")
    if len(coreset) == 0:
        return 0.0, np.zeros(np.asarray(theta).size)
    idx = coreset.indices
    if idx.max() >= labels.size:
        raise ValidationError("coreset index out of bounds for this dataset")
    return head_loglik_grad(theta, features[idx], labels[idx], weights=coreset.weights)


def save_coreset(path, coreset: Coreset, mode_id: str, n_draws: int, seed: int) -> None:
    payload = {
        "mode_id": mode_id,
        "N": int(coreset.n_data),
        "N_star": int(coreset.max_size),
        "S": int(n_draws),
        "seed": int(seed),
        "entries": [[int(i), float(w)] for i, w in zip(coreset.indices, coreset.weights)],
    }
    from .container import atomic_write_bytes

    atomic_write_bytes(path, (json.dumps(payload, indent=1) + "\n").encode())


def load_coreset(path) -> tuple[Coreset, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    entries = payload["entries"]
    coreset = Coreset(
        indices=np.array([e[0] for e in entries], dtype=np.int64),
        weights=np.array([e[1] for e in entries], dtype=np.float64),
        n_data=int(payload["N"]),
        max_size=int(payload["N_star"]),
    )
    return coreset, payload
