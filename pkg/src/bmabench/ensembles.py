"""Ensemble construction and predictive averaging.

Four non-Bayesian routes to a set of weight snapshots:

* deep ensembles — independent trainings from different random inits;
* cyclic ensembles — sequential trainings, each cycle starting from the
  previous cycle's solution with a freshly restarted cosine schedule;
* trajectory variants — a decaying-schedule stage followed by a few epochs
  at a small constant rate, keeping either the final epoch's weights
  (``sgd_t1``) or one snapshot per constant-rate epoch (``sgd_tk``).

``bma_predict`` averages class-probability rows uniformly over everything a
method produces: members, trajectory checkpoints, and (for the Bayesian
last-layer methods) per-member weight samples supplied by a sampler.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn_core
from .exceptions import DimensionError, ValidationError
from .nn_core import Dataset, Network, TrainConfig, TrainHistory

METHODS = ("sgd", "sgd_t1", "sgd_tk", "vi", "mcmc")
ENSEMBLE_TYPES = ("deep", "cyclic")
TRAJECTORY_METHODS = ("sgd_t1", "sgd_tk")

__all__ = [
    "METHODS",
    "ENSEMBLE_TYPES",
    "TRAJECTORY_METHODS",
    "EnsembleConfig",
    "EnsembleMember",
    "TrainingPlan",
    "train_deep_ensemble",
    "train_cyclic_ensemble",
    "train_trajectory",
    "bma_predict",
    "write_manifest",
    "read_manifest",
]


@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int
    ensemble_type: str
    method: str
    samples_per_member: int = 10
    constant_rate: float = 1e-4

    def __post_init__(self):
        if self.n_members < 1:
            raise ValidationError("n_members must be >= 1")
        if self.samples_per_member < 1:
            raise ValidationError("samples_per_member must be >= 1")
        if self.ensemble_type not in ENSEMBLE_TYPES:
            raise ValidationError(f"ensemble_type must be one of {ENSEMBLE_TYPES}")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        # rate 0 is allowed so a frozen constant stage stays expressible
        if self.method in TRAJECTORY_METHODS and self.constant_rate < 0:
            raise ValidationError("constant_rate must be nonnegative for trajectory methods")


@dataclass(frozen=True)
class EnsembleMember:
    """Checkpoints plus provenance (member index, seed, optional predecessor)."""

    checkpoints: tuple[Network, ...]
    index: int
    seed: int | None
    parent_index: int | None = None
    history: TrainHistory | None = None

    def __post_init__(self):
        if not self.checkpoints:
            raise ValidationError("a member needs at least one checkpoint")
        arch = (self.checkpoints[0].layers, self.checkpoints[0].input_shape)
        for c in self.checkpoints[1:]:
            if (c.layers, c.input_shape) != arch:
                raise DimensionError("all checkpoints of a member must share one architecture")

    @property
    def network(self) -> Network:
        """The member's primary checkpoint (the last one)."""
        return self.checkpoints[-1]


@dataclass(frozen=True)
class TrainingPlan:
    """Architecture plus per-stage schedule constants shared by all members."""

    layers: tuple
    input_shape: tuple
    batch_size: int
    epochs: int
    patience: int
    initial_rate: float
    dtype: type = np.float32

    def schedule_length(self, n_train: int) -> int:
        return self.epochs * nn_core.batches_per_epoch(n_train, self.batch_size)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.patience, seed)


def _member_seeds(seed: int) -> tuple[int, int, int]:
    """Derive (init, shuffle, trajectory-stage) integer seeds from one member seed."""
    a, b, c = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    return int(a), int(b), int(c)


def _train_one(plan: TrainingPlan, data, seed: int, start: Network | None = None):
    train_set, val_set = data
    init_seed, shuffle_seed, _ = _member_seeds(seed)
    net = start if start is not None else nn_core.build_network(
        plan.layers, plan.input_shape, init_seed, dtype=plan.dtype
    )
    schedule = nn_core.cosine_schedule(plan.initial_rate, plan.schedule_length(len(train_set)))
    return nn_core.train(net, train_set, val_set, schedule, plan.train_config(shuffle_seed))


def train_deep_ensemble(
    cfg: EnsembleConfig,
    data: tuple[Dataset, Dataset],
    plan: TrainingPlan,
    seeds: Sequence[int],
    workers: int = 1,
) -> list[EnsembleMember]:
    """Independent members from independent random initializations."""
    if cfg.ensemble_type != "deep":
        raise ValidationError("train_deep_ensemble requires ensemble_type='deep'")
    _check_seeds(cfg, seeds)

    def build(j: int) -> EnsembleMember:
        net, hist = _train_one(plan, data, seeds[j])
        return EnsembleMember((net,), index=j, seed=seeds[j], history=hist)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, range(cfg.n_members)))
    return [build(j) for j in range(cfg.n_members)]


def train_cyclic_ensemble(
    cfg: EnsembleConfig,
    data: tuple[Dataset, Dataset],
    plan: TrainingPlan,
    seeds: Sequence[int],
) -> list[EnsembleMember]:
    """Sequential cycles; cycle j starts from cycle j-1's solution.

    The cosine schedule restarts from batch 0 with the full per-cycle budget
    every cycle, and each cycle keeps its best-validation weights (the same
    rule as a single model).
    """
    if cfg.ensemble_type != "cyclic":
        raise ValidationError("train_cyclic_ensemble requires ensemble_type='cyclic'")
    _check_seeds(cfg, seeds)
    members = []
    previous: Network | None = None
    for j in range(cfg.n_members):
        net, hist = _train_one(plan, data, seeds[j], start=previous)
        members.append(
            EnsembleMember(
                (net,),
                index=j,
                seed=seeds[j],
                parent_index=j - 1 if j else None,
                history=hist,
            )
        )
        previous = net
    return members


def _constant_stage(
    plan: TrainingPlan, data, start: Network, n_epochs: int, rate: float, seed: int
) -> tuple[Network, TrainHistory]:
    train_set, val_set = data
    schedule = nn_core.constant_schedule(rate)
    cfg = TrainConfig(plan.batch_size, n_epochs, plan.patience, seed)
    return nn_core.train(
        start, train_set, val_set, schedule, cfg, early_stopping=False, keep_epoch_weights=True
    )


def train_trajectory(
    cfg: EnsembleConfig,
    data: tuple[Dataset, Dataset],
    plan: TrainingPlan,
    seeds: Sequence[int],
    workers: int = 1,
) -> list[EnsembleMember]:
    """Decaying-schedule stage, then ``samples_per_member`` constant-rate epochs.

    Early stopping in the decaying stage jumps straight to the constant
    stage, which always runs its full epoch count. ``sgd_t1`` keeps only the
    final epoch's weights; ``sgd_tk`` keeps the end-of-epoch weights of every
    constant-rate epoch. Cyclic ensembles chain each member's decaying stage
    from the previous member's final (post-constant-stage) weights.
    """
    if cfg.method not in TRAJECTORY_METHODS:
        raise ValidationError("train_trajectory requires a trajectory method")
    _check_seeds(cfg, seeds)

    def build(j: int, start: Network | None) -> EnsembleMember:
        base, _ = _train_one(plan, data, seeds[j], start=start)
        _, _, stage_seed = _member_seeds(seeds[j])
        final, hist = _constant_stage(
            plan, data, base, cfg.samples_per_member, cfg.constant_rate, stage_seed
        )
        if cfg.method == "sgd_t1":
            nets = (final,)
        else:
            nets = tuple(final.with_weights(w) for w in hist.epoch_weights)
        return EnsembleMember(
            nets,
            index=j,
            seed=seeds[j],
            parent_index=(j - 1 if j and cfg.ensemble_type == "cyclic" else None),
            history=hist,
        )

    if cfg.ensemble_type == "cyclic":
        members = []
        previous: Network | None = None
        for j in range(cfg.n_members):
            m = build(j, previous)
            members.append(m)
            previous = m.checkpoints[-1]
        return members
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: build(j, None), range(cfg.n_members)))
    return [build(j, None) for j in range(cfg.n_members)]


def _check_seeds(cfg: EnsembleConfig, seeds: Sequence[int]) -> None:
    if len(seeds) != cfg.n_members:
        raise ValidationError(f"need {cfg.n_members} member seeds, got {len(seeds)}")


def bma_predict(
    members: Sequence[EnsembleMember],
    inputs: np.ndarray,
    sampler: Callable[[int], np.ndarray] | None = None,
) -> np.ndarray:
    """Uniform probability-space average over members, checkpoints, samples.

    Without a sampler, every checkpoint of every member contributes one
    forward pass. With a sampler, ``sampler(j)`` must return a (K, d) array
    of last-layer weight vectors for member j; each replaces the last layer
    of that member's primary checkpoint.
    """
    if not members:
        raise ValidationError("members must be nonempty")
    arch = (members[0].network.layers, members[0].network.input_shape)
    for m in members:
        if (m.network.layers, m.network.input_shape) != arch:
            raise DimensionError("members are not architecturally compatible")

    member_means = []
    for m in members:
        if sampler is None:
            rows = [nn_core.forward(c, inputs) for c in m.checkpoints]
        else:
            thetas = np.asarray(sampler(m.index))
            if thetas.ndim != 2:
                raise DimensionError("sampler must return a (K, d) array of last-layer vectors")
            rows = [nn_core.forward(m.network.with_last_layer(t), inputs) for t in thetas]
        member_means.append(np.mean(np.stack(rows).astype(np.float64), axis=0))
    return np.mean(np.stack(member_means), axis=0)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def write_manifest(path, method: str, ensemble_type: str, members: list[dict]) -> None:
    """JSON manifest: per-member checkpoint paths, seeds, provenance chain."""
    from .container import atomic_write_bytes

    payload = {"method": method, "ensemble_type": ensemble_type, "members": members}
    atomic_write_bytes(path, (json.dumps(payload, indent=1) + "\n").encode())


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
