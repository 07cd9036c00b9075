"""No-U-Turn sampling over last-layer weights.

The target is log prior + coreset-weighted log-likelihood (or any callable
``theta -> (log_density, gradient)``). The sampler is the multinomial NUTS
variant: doubling binary trees, no-U-turn termination, identity mass matrix,
and dual-averaging step-size adaptation during warm-up. Divergent subtrees
(energy error above a large threshold, or non-finite states) are pruned, not
raised; a fully divergent warm-up raises ConvergenceError with diagnostics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coresets import Coreset, weighted_loglik_and_grad
from .exceptions import (
    ConvergenceError,
    DimensionError,
    NumericalError,
    ValidationError,
)
from .last_layer_vi import PriorSpec

MAX_ENERGY_ERROR = 1000.0
MAX_TREE_DEPTH = 10

__all__ = [
    "HmcTarget",
    "ChainState",
    "NutsResult",
    "ChainDiagnostics",
    "log_target_and_grad",
    "leapfrog",
    "nuts_sample",
    "effective_sample_size",
    "chain_diagnostics",
]


@dataclass(frozen=True)
class HmcTarget:
    """Posterior over last-layer weights: isotropic prior x weighted likelihood."""

    coreset: Coreset
    features: np.ndarray
    labels: np.ndarray
    prior: PriorSpec
    dimension: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if f.ndim != 2 or y.shape != (f.shape[0],):
            raise DimensionError("features must be (N, F) with one label per row")
        if self.dimension % (f.shape[1] + 1) != 0:
            raise DimensionError(
                f"dimension {self.dimension} does not factor as (F+1)*C with F={f.shape[1]}"
            )
        n_classes = self.dimension // (f.shape[1] + 1)
        if y.size and y.max() >= n_classes:
            raise ValidationError(f"labels exceed the {n_classes} classes the dimension implies")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y.astype(np.int64))


@dataclass
class ChainState:
    """Mutable per-chain bookkeeping; log_density always matches position."""

    position: np.ndarray
    log_density: float
    step_size: float
    draws: list = field(default_factory=list)


def log_target_and_grad(target, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """log prior(theta) + weighted log-likelihood, and the gradient of both."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (target.dimension,):
        raise DimensionError(f"theta must have length {target.dimension}")
    s2 = target.prior.std ** 2
    d = target.dimension
    log_prior = -0.5 * d * math.log(2.0 * math.pi * s2) - float(theta @ theta) / (2.0 * s2)
    g_prior = -theta / s2
    ll, g_ll = weighted_loglik_and_grad(target.coreset, target.features, target.labels, theta)
    value = log_prior + ll
    if not np.isfinite(value):
        raise NumericalError("log target is non-finite")
    return value, g_prior + g_ll


def _as_logp_fn(target):
    if callable(target):
        return target
    return lambda theta: log_target_and_grad(target, theta)


def _leapfrog_raw(fn, q, p, grad, eps):
    """Signed-step velocity Verlet; non-finite targets become -inf leaves."""
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * p_half
    with np.errstate(all="ignore"):
        try:
            logp_new, grad_new = fn(q_new)
        except (NumericalError, FloatingPointError, OverflowError):
            return q_new, p_half, -np.inf, np.zeros_like(q)
    if not np.isfinite(logp_new) or not np.all(np.isfinite(grad_new)):
        return q_new, p_half, -np.inf, np.zeros_like(q)
    p_new = p_half + 0.5 * eps * grad_new
    return q_new, p_new, float(logp_new), grad_new


def leapfrog(position, momentum, step, target, grad=None):
    """One velocity-Verlet step; returns (position, momentum, log_density, grad).

    Exactly reversible: stepping from the result with negated momentum, then
    negating the momentum again, recovers the start. Non-finite states mark
    divergence (log_density -inf); they are pruned by the sampler rather
    than raised.
    """
    if step <= 0:
        raise ValidationError("leapfrog step must be positive")
    fn = _as_logp_fn(target)
    q = np.asarray(position, dtype=np.float64)
    p = np.asarray(momentum, dtype=np.float64)
    if grad is None:
        _, grad = fn(q)
    return _leapfrog_raw(fn, q, p, np.asarray(grad, dtype=np.float64), float(step))


def _hamiltonian(logp: float, p: np.ndarray) -> float:
    return -logp + 0.5 * float(p @ p)


def _find_initial_step(fn, q, logp, grad, rng) -> float:
    """Double/halve until the one-step acceptance probability crosses 1/2."""
    step = 1.0
    p = rng.standard_normal(q.size)
    h0 = _hamiltonian(logp, p)

    def accept(eps):
        _, p1, logp1, _ = _leapfrog_raw(fn, q, p, grad, eps)
        h1 = _hamiltonian(logp1, p1)
        if not np.isfinite(h1):
            return 0.0
        return math.exp(min(0.0, h0 - h1))

    direction = 1.0 if accept(step) > 0.5 else -1.0
    for _ in range(100):
        step *= 2.0 ** direction
        a = accept(step)
        if (direction > 0 and a <= 0.5) or (direction < 0 and a >= 0.5):
            break
        if step < 1e-12 or step > 1e12:
            break
    return min(max(step, 1e-12), 1e12)


class _Tree:
    __slots__ = (
        "q_minus", "p_minus", "grad_minus",
        "q_plus", "p_plus", "grad_plus",
        "q_prop", "logp_prop", "grad_prop",
        "log_weight", "sum_alpha", "n_alpha", "keep_going", "n_divergent",
    )

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _no_uturn(q_minus, q_plus, p_minus, p_plus) -> bool:
    dq = q_plus - q_minus
    return float(dq @ p_minus) >= 0.0 and float(dq @ p_plus) >= 0.0


def _build_tree(fn, q, p, grad, direction, depth, step, h0, rng) -> _Tree:
    if depth == 0:
        q1, p1, logp1, grad1 = _leapfrog_raw(fn, q, p, grad, direction * step)
        h1 = _hamiltonian(logp1, p1)
        energy_error = h1 - h0 if np.isfinite(h1) else np.inf
        divergent = energy_error > MAX_ENERGY_ERROR
        log_weight = -energy_error if not divergent else -np.inf
        alpha = math.exp(min(0.0, -energy_error)) if np.isfinite(energy_error) else 0.0
        return _Tree(
            q_minus=q1, p_minus=p1, grad_minus=grad1,
            q_plus=q1, p_plus=p1, grad_plus=grad1,
            q_prop=q1, logp_prop=logp1, grad_prop=grad1,
            log_weight=log_weight, sum_alpha=alpha, n_alpha=1,
            keep_going=not divergent, n_divergent=int(divergent),
        )

    first = _build_tree(fn, q, p, grad, direction, depth - 1, step, h0, rng)
    if not first.keep_going:
        return first
    if direction > 0:
        second = _build_tree(
            fn, first.q_plus, first.p_plus, first.grad_plus, direction, depth - 1, step, h0, rng
        )
        first.q_plus, first.p_plus, first.grad_plus = second.q_plus, second.p_plus, second.grad_plus
    else:
        second = _build_tree(
            fn, first.q_minus, first.p_minus, first.grad_minus, direction, depth - 1, step, h0, rng
        )
        first.q_minus, first.p_minus, first.grad_minus = (
            second.q_minus, second.p_minus, second.grad_minus,
        )

    total = np.logaddexp(first.log_weight, second.log_weight)
    # multinomial selection among the merged subtree's leaves
    if np.isfinite(second.log_weight) and math.log(rng.random() + 1e-300) < second.log_weight - total:
        first.q_prop, first.logp_prop, first.grad_prop = second.q_prop, second.logp_prop, second.grad_prop
    first.log_weight = total
    first.sum_alpha += second.sum_alpha
    first.n_alpha += second.n_alpha
    first.n_divergent += second.n_divergent
    first.keep_going = (
        second.keep_going and _no_uturn(first.q_minus, first.q_plus, first.p_minus, first.p_plus)
    )
    return first


def _nuts_transition(fn, q, logp, grad, step, rng, max_depth=MAX_TREE_DEPTH):
    """One NUTS draw. Returns (q, logp, grad, accept_stat, n_divergent)."""
    p0 = rng.standard_normal(q.size)
    h0 = _hamiltonian(logp, p0)

    q_minus = q_plus = q
    p_minus = p_plus = p0
    grad_minus = grad_plus = grad
    q_prop, logp_prop, grad_prop = q, logp, grad
    log_weight = 0.0  # weight of the initial point relative to itself
    sum_alpha = 0.0
    n_alpha = 0
    n_divergent = 0

    for depth in range(max_depth):
        direction = 1 if rng.random() < 0.5 else -1
        if direction > 0:
            tree = _build_tree(fn, q_plus, p_plus, grad_plus, 1, depth, step, h0, rng)
            q_plus, p_plus, grad_plus = tree.q_plus, tree.p_plus, tree.grad_plus
        else:
            tree = _build_tree(fn, q_minus, p_minus, grad_minus, -1, depth, step, h0, rng)
            q_minus, p_minus, grad_minus = tree.q_minus, tree.p_minus, tree.grad_minus

        sum_alpha += tree.sum_alpha
        n_alpha += tree.n_alpha
        n_divergent += tree.n_divergent
        if tree.keep_going and np.isfinite(tree.log_weight):
            # biased progressive sampling: favor the new subtree
            if math.log(rng.random() + 1e-300) < tree.log_weight - log_weight:
                q_prop, logp_prop, grad_prop = tree.q_prop, tree.logp_prop, tree.grad_prop
            log_weight = np.logaddexp(log_weight, tree.log_weight)
        if not tree.keep_going:
            break
        if not _no_uturn(q_minus, q_plus, p_minus, p_plus):
            break

    accept = sum_alpha / n_alpha if n_alpha else 0.0
    return q_prop, logp_prop, grad_prop, accept, n_divergent


@dataclass
class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    mu: float
    target: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    h_bar: float = 0.0
    log_step: float = 0.0
    log_step_bar: float = 0.0
    count: int = 0

    def update(self, accept_stat: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_step = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** (-self.kappa)
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar
        return math.exp(self.log_step)

    def final(self) -> float:
        return math.exp(self.log_step_bar)


@dataclass(frozen=True)
class NutsResult:
    """Thinned draws plus run diagnostics."""

    samples: np.ndarray
    step_size: float
    n_divergent: int
    divergence_rate: float
    accept_rate: float

    def __iter__(self):
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)


def nuts_sample(
    target,
    init: np.ndarray,
    warmup: int,
    n_draws: int,
    thin: int,
    seed: int,
    max_depth: int = MAX_TREE_DEPTH,
    target_accept: float = 0.8,
) -> NutsResult:
    """Run one NUTS chain and keep every ``thin``-th of ``n_draws`` draws.

    Step size adapts by dual averaging during warm-up and is then frozen.
    ``n_draws`` must be divisible by ``thin``; the thinned output has exactly
    n_draws / thin rows. Deterministic given the seed. A warm-up in which
    every transition diverges raises ConvergenceError with diagnostics.
    """
    if warmup < 0:
        raise ValidationError("warmup must be >= 0")
    if thin < 1 or n_draws < thin:
        raise ValidationError("need n_draws >= thin >= 1")
    if n_draws % thin != 0:
        raise ValidationError("n_draws must be divisible by thin")

    fn = _as_logp_fn(target)
    rng = np.random.default_rng(seed)
    q = np.asarray(init, dtype=np.float64).copy()
    logp, grad = fn(q)
    if not np.isfinite(logp):
        raise ValidationError("initial position has non-finite log density")

    step = _find_initial_step(fn, q, logp, grad, rng)
    da = _DualAveraging(mu=math.log(10.0 * step), target=target_accept)
    da.log_step = math.log(step)
    da.log_step_bar = math.log(step)

    warm_divergent_transitions = 0
    for _ in range(warmup):
        q, logp, grad, accept, n_div = _nuts_transition(fn, q, logp, grad, step, rng, max_depth)
        step = da.update(accept)
        step = min(max(step, 1e-12), 1e12)
        if n_div:
            warm_divergent_transitions += 1
    if warmup:
        step = min(max(da.final(), 1e-12), 1e12)
        if warm_divergent_transitions == warmup:
            raise ConvergenceError(
                "every warm-up transition diverged",
                diagnostics={
                    "step_size": step,
                    "warmup": warmup,
                    "divergent_transitions": warm_divergent_transitions,
                },
            )

    keep = np.empty((n_draws // thin, q.size))
    n_divergent = 0
    accept_sum = 0.0
    for i in range(n_draws):
        q, logp, grad, accept, n_div = _nuts_transition(fn, q, logp, grad, step, rng, max_depth)
        n_divergent += n_div
        accept_sum += accept
        if (i + 1) % thin == 0:
            keep[(i + 1) // thin - 1] = q
    return NutsResult(
        samples=keep,
        step_size=float(step),
        n_divergent=int(n_divergent),
        divergence_rate=float(n_divergent / n_draws),
        accept_rate=float(accept_sum / n_draws),
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainDiagnostics:
    r_hat: np.ndarray
    ess: np.ndarray
    degenerate: tuple[int, ...]


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance (denominator n) of a 1-D sequence, via FFT."""
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def _ess_single_coord(chains: np.ndarray) -> float:
    """Stan-style autocorrelation ESS; chains shaped (m, n)."""
    m, n = chains.shape
    acov = np.stack([_autocovariance(chains[c]) for c in range(m)])
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    if w == 0:
        return float(m * n)
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus

    # Geyer initial monotone sequence over pair sums
    tau = 0.0
    prev_pair = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev_pair)
        tau += pair
        prev_pair = pair
        t += 2
    tau = max(2.0 * tau - 1.0, 1.0 / math.log10(n + 10))
    return float(m * n / tau)


def effective_sample_size(draws) -> np.ndarray:
    """Autocorrelation-based ESS per coordinate.

    ``draws`` is one (n, d) chain or a list of equal-length chains.
    """
    chains = _stack_chains(draws, min_chains=1)
    _, _, d = chains.shape
    return np.array([_ess_single_coord(chains[:, :, j]) for j in range(d)])


def _stack_chains(draws, min_chains: int) -> np.ndarray:
    if isinstance(draws, np.ndarray) and draws.ndim == 2:
        chains = draws[None, :, :]
    else:
        arrs = [np.asarray(c, dtype=np.float64) for c in draws]
        if not arrs or any(a.ndim != 2 for a in arrs):
            raise ValidationError("chains must be 2-D (draws, dim) arrays")
        if len({a.shape for a in arrs}) != 1:
            raise ValidationError("all chains must share one shape")
        chains = np.stack(arrs)
    if chains.shape[0] < min_chains:
        raise ValidationError(f"need at least {min_chains} chains")
    if chains.shape[1] < 10:
        raise ValidationError("each chain needs at least 10 draws")
    return chains


def chain_diagnostics(chains) -> ChainDiagnostics:
    """Split-R-hat and ESS per coordinate across >= 2 chains.

    Zero-variance coordinates are reported with R-hat 1 plus a warning and
    listed in ``degenerate``.
    """
    stacked = _stack_chains(chains, min_chains=2)
    m, n, d = stacked.shape
    half = n // 2
    split = np.concatenate([stacked[:, :half, :], stacked[:, half : 2 * half, :]])
    ms, ns = split.shape[0], split.shape[1]

    means = split.mean(axis=1)  # (ms, d)
    variances = split.var(axis=1, ddof=1)  # (ms, d)
    w = variances.mean(axis=0)
    b_over_n = means.var(axis=0, ddof=1)
    degenerate = [j for j in range(d) if w[j] == 0]
    r_hat = np.ones(d)
    ok = w > 0
    var_plus = (ns - 1.0) / ns * w[ok] + b_over_n[ok]
    r_hat[ok] = np.sqrt(var_plus / w[ok])
    if degenerate:
        warnings.warn(f"zero-variance coordinates {degenerate}; R-hat reported as 1 there")

    ess = np.array(
        [
            float(ms * ns) if j in degenerate else _ess_single_coord(split[:, :, j])
            for j in range(d)
        ]
    )
    return ChainDiagnostics(r_hat=r_hat, ess=ess, degenerate=tuple(degenerate))
