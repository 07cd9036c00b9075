"""Experiment runner: data, configuration, the method x size x seed matrix.

A run directory is self-describing: ``manifest.json`` records the config,
every trained artifact's path, and the finished result rows, so re-running
the same config resumes instead of retraining. ``results.csv`` is always
regenerated from the manifest rows in a canonical order.

Seeds for every cell derive from the master seed through
``numpy.random.SeedSequence`` spawn keys, so cells are independent of
execution order and of each other.
"""

from __future__ import annotations

import csv
import glob
import io
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import coresets as coresets_mod
from . import ensembles as ens
from . import last_layer_vi as vi_mod
from . import mcmc as mcmc_mod
from . import metrics as metrics_mod
from . import nn_core
from .container import atomic_write_bytes, load_checkpoint, read_container, save_checkpoint, write_container, SAMPLES_MAGIC
from .exceptions import ConvergenceError, FormatError, ValidationError
from .nn_core import Conv2d, Dataset, Dense, Flatten, Relu, Softmax

CSV_HEADER = ["arch", "ensemble_type", "method", "n_models", "run", "brier", "accuracy", "ece", "wall_seconds"]

# spawn-key stage tags for per-member seed streams
_STAGE_TRAIN, _STAGE_VI, _STAGE_PROJECT, _STAGE_NUTS, _STAGE_EVAL = range(5)

__all__ = [
    "ExperimentConfig",
    "ResultRow",
    "read_cifar10_batch",
    "load_cifar10",
    "synthetic_dataset",
    "split",
    "derive_seed",
    "run_experiment",
    "run_stage",
    "emit_report",
    "load_results_csv",
]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


def read_cifar10_batch(path) -> Dataset:
    """Parse one CIFAR-10 binary batch file into labels and [0,1] images."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {_CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max(initial=0) > 9:
        raise FormatError(f"{path}: label byte {int(labels.max())} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels.astype(np.int64))


@dataclass(frozen=True)
class Cifar10Data:
    train: Dataset
    test: Dataset
    channel_mean: np.ndarray
    channel_std: np.ndarray


def load_cifar10(data_dir, subset: int | None = None, subset_seed: int = 0) -> Cifar10Data:
    """Load train batches and the test batch; standardize by train statistics.

    The optional ``subset`` keeps a seeded random sample of the training
    records (the test batch is never subsetted or split).
    """
    data_dir = Path(data_dir)
    train_files = sorted(glob.glob(str(data_dir / "data_batch_*")))
    test_files = sorted(glob.glob(str(data_dir / "test_batch*")))
    if not train_files or not test_files:
        raise ValidationError(f"{data_dir}: expected CIFAR-10 binary batch files")
    parts = [read_cifar10_batch(p) for p in train_files]
    train = Dataset(
        np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts])
    )
    test = read_cifar10_batch(test_files[0])
    if subset is not None and subset < len(train):
        idx = np.random.default_rng(subset_seed).choice(len(train), size=subset, replace=False)
        train = train.take(np.sort(idx))
    mean = train.x.mean(axis=(0, 2, 3), keepdims=True)
    std = train.x.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std == 0, 1.0, std)
    train = Dataset(((train.x - mean) / std).astype(np.float32), train.y)
    test = Dataset(((test.x - mean) / std).astype(np.float32), test.y)
    return Cifar10Data(train, test, mean.ravel(), std.ravel())


def synthetic_dataset(n: int, n_classes: int, seed: int, spread: float = 0.9) -> Dataset:
    """2-D Gaussian-mixture classes on a ring; overlap controlled by ``spread``."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    angles = 2.0 * np.pi * y / n_classes
    centers = 1.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = centers + spread * rng.standard_normal((n, 2))
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def split(dataset: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split into disjoint (train, val) covering the data."""
    if not 0.0 < train_frac < 1.0:
        raise ValidationError("train_frac must lie strictly between 0 and 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(n * train_frac)
    return dataset.take(order[:cut]), dataset.take(order[cut:])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic"  # "synthetic" | "cifar10"
    data_dir: str | None = None
    subset: int | None = 5000
    synthetic_train: int = 2000
    synthetic_test: int = 1000
    synthetic_classes: int = 4
    synthetic_spread: float = 0.9
    # architecture
    arch: str = "mlp"  # "mlp" | "cnn"
    mlp_hidden: int = 32
    cnn_dense: int = 128
    # experiment matrix
    methods: tuple[str, ...] = ens.METHODS
    ensemble_types: tuple[str, ...] = ("deep",)
    max_members: int = 8
    runs: int = 3
    # training protocol
    train_frac: float = 0.8
    batch_size: int = 32
    epochs: int = 50
    trajectory_decay_epochs: int = 40
    trajectory_epochs: int = 10
    patience: int = 10
    initial_rate: float = 0.1
    constant_rate: float = 1e-4
    # last-layer VI
    vi_steps: int = 5000
    vi_rate: float = 1e-3
    vi_prior_std: float = 1.0
    vi_mc_samples: int = 1
    vi_batch_size: int | None = 256
    eval_samples: int = 10
    # coresets
    coreset_draws: int = 500
    coreset_size: int = 200
    # MCMC
    mcmc_warmup: int = 1000
    mcmc_draws: int = 200
    mcmc_thin: int = 20
    # run control
    out_dir: str = "results"
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1 or self.max_members < 1:
            raise ValidationError("runs and max_members must be >= 1")
        for m in self.methods:
            if m not in ens.METHODS:
                raise ValidationError(f"unknown method {m!r}")
        for t in self.ensemble_types:
            if t not in ens.ENSEMBLE_TYPES:
                raise ValidationError(f"unknown ensemble type {t!r}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ValidationError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar10":
            if self.data_dir is None or not os.path.isdir(self.data_dir):
                raise ValidationError("cifar10 dataset requires an existing data_dir")
        if self.mcmc_draws % self.mcmc_thin != 0:
            raise ValidationError("mcmc_draws must be divisible by mcmc_thin")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "ensemble_types", tuple(self.ensemble_types))

    def identity(self) -> dict:
        """Config dict minus fields that do not affect the science."""
        d = asdict(self)
        d.pop("out_dir")
        d.pop("workers")
        d["methods"] = list(self.methods)
        d["ensemble_types"] = list(self.ensemble_types)
        return d


PROFILES = {
    "desk": {},
    "paper": {
        "dataset": "cifar10",
        "subset": None,
        "arch": "cnn",
        "max_members": 16,
        "runs": 5,
        "coreset_draws": 5000,
        "coreset_size": 1500,
        "mcmc_warmup": 10000,
        "mcmc_draws": 1000,
        "mcmc_thin": 100,
        "ensemble_types": ("deep", "cyclic"),
    },
}


def config_from_dict(overrides: dict, profile: str = "desk") -> ExperimentConfig:
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}; choose one of {sorted(PROFILES)}")
    merged = dict(PROFILES[profile])
    merged.update(overrides)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for key in ("methods", "ensemble_types"):
        if key in merged:
            merged[key] = tuple(merged[key])
    return ExperimentConfig(**merged)


def load_config(path, profile: str = "desk") -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh), profile=profile)


def derive_seed(master: int, *key: int) -> int:
    """Splittable per-cell seed: SeedSequence spawn keys off the master seed."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Architectures and data assembly
# ---------------------------------------------------------------------------


def architecture(cfg: ExperimentConfig, input_shape: tuple, n_classes: int) -> tuple:
    if cfg.arch == "mlp":
        (dim,) = input_shape
        return (
            Dense(dim, cfg.mlp_hidden),
            Relu(),
            Dense(cfg.mlp_hidden, n_classes),
            Softmax(),
        )
    if cfg.arch == "cnn":
        c, h, w = input_shape
        layers = [Conv2d(c, 16, 3, stride=2), Relu(), Conv2d(16, 32, 3, stride=2), Relu(), Flatten()]
        shapes = nn_core.infer_shapes(tuple(layers), input_shape)
        flat = shapes[-1][0]
        layers += [Dense(flat, cfg.cnn_dense), Relu(), Dense(cfg.cnn_dense, n_classes), Softmax()]
        return tuple(layers)
    raise ValidationError(f"unknown architecture {cfg.arch!r}")


@dataclass(frozen=True)
class ExperimentData:
    train: Dataset
    val: Dataset
    test: Dataset
    input_shape: tuple
    n_classes: int


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    if cfg.dataset == "cifar10":
        data = load_cifar10(cfg.data_dir, subset=cfg.subset, subset_seed=derive_seed(cfg.master_seed, 900))
        pool, test = data.train, data.test
        n_classes = 10
        input_shape = (3, 32, 32)
    else:
        pool = synthetic_dataset(
            cfg.synthetic_train, cfg.synthetic_classes, derive_seed(cfg.master_seed, 901), cfg.synthetic_spread
        )
        test = synthetic_dataset(
            cfg.synthetic_test, cfg.synthetic_classes, derive_seed(cfg.master_seed, 902), cfg.synthetic_spread
        )
        n_classes = cfg.synthetic_classes
        input_shape = (2,)
    train, val = split(pool, cfg.train_frac, derive_seed(cfg.master_seed, 903))
    return ExperimentData(train, val, test, input_shape, n_classes)


# ---------------------------------------------------------------------------
# Result rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    arch: str
    ensemble_type: str
    method: str
    n_models: int
    run_index: int
    brier: float
    accuracy: float
    ece: float
    wall_seconds: float

    def as_csv(self) -> list[str]:
        return [
            self.arch,
            self.ensemble_type,
            self.method,
            str(self.n_models),
            str(self.run_index),
            repr(self.brier),
            repr(self.accuracy),
            repr(self.ece),
            repr(self.wall_seconds),
        ]

    @staticmethod
    def from_list(values) -> "ResultRow":
        return ResultRow(
            arch=values[0],
            ensemble_type=values[1],
            method=values[2],
            n_models=int(values[3]),
            run_index=int(values[4]),
            brier=float(values[5]),
            accuracy=float(values[6]),
            ece=float(values[7]),
            wall_seconds=float(values[8]),
        )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class Manifest:
    """Mutable view over manifest.json with atomic rewrites."""

    def __init__(self, out_dir: Path, cfg: ExperimentConfig):
        self.path = out_dir / "manifest.json"
        if self.path.exists():
            with open(self.path) as fh:
                self.data = json.load(fh)
            if self.data.get("config") != cfg.identity():
                raise ValidationError(
                    f"{self.path} belongs to a different config; use a fresh out_dir"
                )
        else:
            self.data = {"config": cfg.identity(), "cells": {}}
            self.save()

    def cell(self, key: str) -> dict:
        return self.data["cells"].setdefault(key, {})

    def save(self) -> None:
        atomic_write_bytes(self.path, (json.dumps(self.data, indent=1) + "\n").encode())


def _cell_key(ensemble_type: str, method: str, run: int) -> str:
    return f"{ensemble_type}|{method}|run{run}"


def _cell_tag(ensemble_type: str, method: str, run: int) -> str:
    return f"{ensemble_type}_{method}_run{run}"


# ---------------------------------------------------------------------------
# Per-cell stages
# ---------------------------------------------------------------------------


class _CellRunner:
    """Runs (and resumes) one (ensemble_type, method, run) cell."""

    def __init__(self, cfg: ExperimentConfig, data: ExperimentData, out: Path,
                 manifest: Manifest, ensemble_type: str, method: str, run: int):
        self.cfg = cfg
        self.data = data
        self.out = out
        self.manifest = manifest
        self.ensemble_type = ensemble_type
        self.method = method
        self.run = run
        self.key = _cell_key(ensemble_type, method, run)
        self.tag = _cell_tag(ensemble_type, method, run)
        self.cell = manifest.cell(self.key)
        self.layers = architecture(cfg, data.input_shape, data.n_classes)
        self.t_idx = ens.ENSEMBLE_TYPES.index(ensemble_type)
        self.m_idx = ens.METHODS.index(method)

    # seed streams -----------------------------------------------------
    def _seed(self, member: int, stage: int) -> int:
        return derive_seed(self.cfg.master_seed, self.t_idx, self.m_idx, self.run, member, stage)

    # member training ----------------------------------------------------
    def _plan(self) -> ens.TrainingPlan:
        cfg = self.cfg
        epochs = cfg.trajectory_decay_epochs if self.method in ens.TRAJECTORY_METHODS else cfg.epochs
        return ens.TrainingPlan(
            layers=self.layers,
            input_shape=self.data.input_shape,
            batch_size=cfg.batch_size,
            epochs=epochs,
            patience=cfg.patience,
            initial_rate=cfg.initial_rate,
        )

    def _ensemble_config(self) -> ens.EnsembleConfig:
        return ens.EnsembleConfig(
            n_members=self.cfg.max_members,
            ensemble_type=self.ensemble_type,
            method=self.method,
            samples_per_member=self.cfg.trajectory_epochs,
            constant_rate=self.cfg.constant_rate,
        )

    def ensure_members(self) -> list[ens.EnsembleMember]:
        if self.cell.get("members"):
            return self._load_members()
        seeds = [self._seed(j, _STAGE_TRAIN) for j in range(self.cfg.max_members)]
        ecfg = self._ensemble_config()
        plan = self._plan()
        payload = (self.data.train, self.data.val)
        t0 = time.perf_counter()
        if self.method in ens.TRAJECTORY_METHODS:
            members = ens.train_trajectory(ecfg, payload, plan, seeds, workers=self.cfg.workers)
        elif self.ensemble_type == "deep":
            members = ens.train_deep_ensemble(ecfg, payload, plan, seeds, workers=self.cfg.workers)
        else:
            members = ens.train_cyclic_ensemble(ecfg, payload, plan, seeds)
        per_member = (time.perf_counter() - t0) / len(members)
        times = [per_member] * len(members)

        ckpt_dir = self.out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for m, wall in zip(members, times):
            paths = []
            for k, net in enumerate(m.checkpoints):
                rel = f"checkpoints/{self.tag}_m{m.index}_c{k}.bin"
                save_checkpoint(self.out / rel, net)
                paths.append(rel)
            records.append(
                {
                    "index": m.index,
                    "seed": m.seed,
                    "parent_index": m.parent_index,
                    "checkpoints": paths,
                    "seconds": wall,
                }
            )
        self.cell["members"] = records
        self.manifest.save()
        ens.write_manifest(
            self.out / f"ensemble_{self.tag}.json", self.method, self.ensemble_type, records
        )
        return members

    def _load_members(self) -> list[ens.EnsembleMember]:
        members = []
        for rec in self.cell["members"]:
            nets = tuple(
                load_checkpoint(self.out / rel, self.layers, self.data.input_shape)
                for rel in rec["checkpoints"]
            )
            members.append(
                ens.EnsembleMember(
                    nets, index=rec["index"], seed=rec["seed"], parent_index=rec["parent_index"]
                )
            )
        return members

    # VI posteriors ------------------------------------------------------
    def ensure_posteriors(self, members) -> list[vi_mod.GaussianPosterior]:
        if self.cell.get("posteriors"):
            return [vi_mod.load_posterior(self.out / rel) for rel in self.cell["posteriors"]]
        prior = vi_mod.PriorSpec(std=self.cfg.vi_prior_std)
        (self.out / "posteriors").mkdir(parents=True, exist_ok=True)
        rels, posteriors, seconds = [], [], []
        for m in members:
            t0 = time.perf_counter()
            feats = vi_mod.extract_features(m.network, self.data.train.x)
            q, _ = vi_mod.fit_vi(
                feats,
                self.data.train.y,
                prior,
                init_mean=m.network.last_layer_weights().astype(np.float64),
                steps=self.cfg.vi_steps,
                rate=self.cfg.vi_rate,
                seed=self._seed(m.index, _STAGE_VI),
                n_mc=self.cfg.vi_mc_samples,
                batch_size=self.cfg.vi_batch_size,
            )
            rel = f"posteriors/{self.tag}_m{m.index}.bin"
            vi_mod.save_posterior(self.out / rel, q)
            rels.append(rel)
            posteriors.append(q)
            seconds.append(time.perf_counter() - t0)
        self.cell["posteriors"] = rels
        self.cell["posterior_seconds"] = seconds
        self.manifest.save()
        return posteriors

    # coresets -------------------------------------------------------------
    def ensure_coresets(self, members, posteriors) -> list[coresets_mod.Coreset]:
        if self.cell.get("coresets"):
            return [coresets_mod.load_coreset(self.out / rel)[0] for rel in self.cell["coresets"]]
        (self.out / "coresets").mkdir(parents=True, exist_ok=True)
        rels, out, seconds = [], [], []
        for m, q in zip(members, posteriors):
            t0 = time.perf_counter()
            feats = vi_mod.extract_features(m.network, self.data.train.x)
            seed = self._seed(m.index, _STAGE_PROJECT)
            proj = coresets_mod.project_loglik(
                feats, self.data.train.y, q, n_draws=self.cfg.coreset_draws, seed=seed
            )
            coreset = coresets_mod.build_coreset(proj, self.cfg.coreset_size)
            rel = f"coresets/{self.tag}_m{m.index}.json"
            coresets_mod.save_coreset(
                self.out / rel, coreset, mode_id=f"{self.tag}_m{m.index}",
                n_draws=self.cfg.coreset_draws, seed=seed,
            )
            rels.append(rel)
            out.append(coreset)
            seconds.append(time.perf_counter() - t0)
        self.cell["coresets"] = rels
        self.cell["coreset_seconds"] = seconds
        self.manifest.save()
        return out

    # MCMC samples ---------------------------------------------------------
    def ensure_samples(self, members, posteriors, csets) -> list[np.ndarray]:
        if self.cell.get("samples"):
            out = []
            for rel in self.cell["samples"]:
                _, tensors, _ = read_container(self.out / rel, SAMPLES_MAGIC)
                out.append(tensors[0].astype(np.float64))
            return out
        cfg = self.cfg
        (self.out / "samples").mkdir(parents=True, exist_ok=True)
        prior = vi_mod.PriorSpec(std=cfg.vi_prior_std)
        rels, all_samples, seconds = [], [], []
        for m, q, coreset in zip(members, posteriors, csets):
            t0 = time.perf_counter()
            feats = vi_mod.extract_features(m.network, self.data.train.x)
            target = mcmc_mod.HmcTarget(
                coreset=coreset,
                features=feats,
                labels=self.data.train.y,
                prior=prior,
                dimension=q.dim,
            )
            # thin=1 keeps the full draw sequence for diagnostics; the saved
            # samples are thinned exactly as nuts_sample would thin them
            result = mcmc_mod.nuts_sample(
                target,
                init=q.mean,
                warmup=cfg.mcmc_warmup,
                n_draws=cfg.mcmc_draws,
                thin=1,
                seed=self._seed(m.index, _STAGE_NUTS),
            )
            if result.divergence_rate > 0.10:
                raise ConvergenceError(
                    f"{self.tag} member {m.index}: divergence rate "
                    f"{result.divergence_rate:.2f} exceeds 10%",
                    diagnostics={"step_size": result.step_size, "n_divergent": result.n_divergent},
                )
            kept = result.samples[cfg.mcmc_thin - 1 :: cfg.mcmc_thin]
            half = len(result.samples) // 2
            diag = mcmc_mod.chain_diagnostics(
                [result.samples[:half], result.samples[half : 2 * half]]
            )
            rel = f"samples/{self.tag}_m{m.index}.bin"
            write_container(self.out / rel, SAMPLES_MAGIC, [kept.astype(np.float32)])
            sidecar = {
                "step_size": result.step_size,
                "divergent": result.n_divergent,
                "divergence_rate": result.divergence_rate,
                "accept_rate": result.accept_rate,
                "r_hat_max": float(diag.r_hat.max()),
                "ess_min": float(diag.ess.min()),
            }
            atomic_write_bytes(
                self.out / (rel + ".diag.json"), (json.dumps(sidecar, indent=1) + "\n").encode()
            )
            rels.append(rel)
            all_samples.append(kept)
            seconds.append(time.perf_counter() - t0)
        self.cell["samples"] = rels
        self.cell["sample_seconds"] = seconds
        self.manifest.save()
        return all_samples

    # evaluation -----------------------------------------------------------
    def member_costs(self) -> list[float]:
        n = self.cfg.max_members
        costs = [rec["seconds"] for rec in self.cell["members"]]
        for key in ("posterior_seconds", "coreset_seconds", "sample_seconds"):
            extra = self.cell.get(key)
            if extra:
                costs = [c + e for c, e in zip(costs, extra)]
        return costs[:n]

    def ensure_rows(self) -> list[ResultRow]:
        if self.cell.get("rows"):
            return [ResultRow.from_list(r) for r in self.cell["rows"]]
        members = self.ensure_members()
        sampler = None
        if self.method == "vi":
            posteriors = self.ensure_posteriors(members)
            draws = [
                vi_mod.sample_last_layer(q, self.cfg.eval_samples, self._seed(m.index, _STAGE_EVAL))
                for m, q in zip(members, posteriors)
            ]
            sampler = lambda j: draws[j]
        elif self.method == "mcmc":
            posteriors = self.ensure_posteriors(members)
            csets = self.ensure_coresets(members, posteriors)
            samples = self.ensure_samples(members, posteriors, csets)
            sampler = lambda j: samples[j]

        test = self.data.test
        t0 = time.perf_counter()
        member_probs = []
        for m in members:
            member_probs.append(ens.bma_predict([m], test.x, sampler=sampler))
        stacked = np.stack(member_probs)
        cumulative = np.cumsum(stacked, axis=0)
        eval_seconds = time.perf_counter() - t0

        costs = self.member_costs()
        rows = []
        for k in range(1, self.cfg.max_members + 1):
            probs = cumulative[k - 1] / k
            ps = metrics_mod.PredictionSet(probs, test.y)
            rows.append(
                ResultRow(
                    arch=self.cfg.arch,
                    ensemble_type=self.ensemble_type,
                    method=self.method,
                    n_models=k,
                    run_index=self.run,
                    brier=metrics_mod.brier(ps),
                    accuracy=metrics_mod.accuracy(ps),
                    ece=metrics_mod.ece(ps),
                    wall_seconds=float(sum(costs[:k]) + eval_seconds),
                )
            )
        self.cell["rows"] = [row.as_csv() for row in rows]
        self.cell["status"] = "complete"
        self.cell.pop("error", None)
        self.manifest.save()
        return rows


# ---------------------------------------------------------------------------
# Matrix driver
# ---------------------------------------------------------------------------

_STAGE_ORDER = ("train", "coreset", "sample", "evaluate")


def _cells(cfg: ExperimentConfig):
    for ensemble_type in cfg.ensemble_types:
        for method in cfg.methods:
            for run in range(cfg.runs):
                yield ensemble_type, method, run


def run_stage(cfg: ExperimentConfig, stage: str) -> Path:
    """Run one pipeline stage (train/coreset/sample/evaluate) over the matrix.

    Stages are idempotent: anything already recorded in the manifest is
    reused. A failing cell is recorded as failed and the matrix continues.
    """
    if stage not in _STAGE_ORDER:
        raise ValidationError(f"unknown stage {stage!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    manifest = Manifest(out, cfg)
    for ensemble_type, method, run in _cells(cfg):
        runner = _CellRunner(cfg, data, out, manifest, ensemble_type, method, run)
        try:
            if stage == "train":
                runner.ensure_members()
            elif stage == "coreset" and method == "mcmc":
                members = runner.ensure_members()
                runner.ensure_coresets(members, runner.ensure_posteriors(members))
            elif stage == "sample" and method == "mcmc":
                members = runner.ensure_members()
                posteriors = runner.ensure_posteriors(members)
                csets = runner.ensure_coresets(members, posteriors)
                runner.ensure_samples(members, posteriors, csets)
            elif stage == "evaluate":
                runner.ensure_rows()
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            runner.cell["status"] = "failed"
            runner.cell["error"] = f"{type(exc).__name__}: {exc}"
            manifest.save()
    if stage == "evaluate":
        write_results_csv(out, collect_rows(out))
    return out


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Train, infer, and evaluate the full matrix; write results.csv."""
    return run_stage(cfg, "evaluate")


def collect_rows(out_dir) -> list[ResultRow]:
    with open(Path(out_dir) / "manifest.json") as fh:
        data = json.load(fh)
    rows = []
    for cell in data["cells"].values():
        for r in cell.get("rows", []):
            rows.append(ResultRow.from_list(r))
    rows.sort(key=lambda r: (r.ensemble_type, r.method, r.run_index, r.n_models))
    return rows


def write_results_csv(out_dir, rows: list[ResultRow]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.as_csv())
    path = Path(out_dir) / "results.csv"
    atomic_write_bytes(path, buf.getvalue().encode())
    return path


def load_results_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise FormatError(f"{path}: unexpected CSV header {header}")
        return [ResultRow.from_list(r) for r in reader]


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def aggregate_rows(rows: list[ResultRow], ensemble_type: str, method: str) -> metrics_mod.MetricsCurve:
    sel = [r for r in rows if r.ensemble_type == ensemble_type and r.method == method]
    if not sel:
        raise ValidationError(f"no rows for ({ensemble_type}, {method})")
    runs = sorted({r.run_index for r in sel})
    sizes = sorted({r.n_models for r in sel})
    grids = {name: np.full((len(runs), len(sizes)), np.nan) for name in ("brier", "accuracy", "ece")}
    for r in sel:
        i, j = runs.index(r.run_index), sizes.index(r.n_models)
        grids["brier"][i, j] = r.brier
        grids["accuracy"][i, j] = r.accuracy
        grids["ece"][i, j] = r.ece
    for name, g in grids.items():
        if np.any(np.isnan(g)):
            raise ValidationError(f"ragged results for ({ensemble_type}, {method}, {name})")
    return metrics_mod.aggregate_runs(method, grids)


def emit_report(out_dir) -> list[Path]:
    """Write results.csv plus one SVG per (metric, ensemble type)."""
    out = Path(out_dir)
    rows = collect_rows(out)
    if not rows:
        raise ValidationError(f"{out}: no results to report")
    write_results_csv(out, rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = out / "report"
    report_dir.mkdir(exist_ok=True)
    written = []
    ensemble_types = sorted({r.ensemble_type for r in rows})
    methods = sorted({r.method for r in rows})
    for metric in ("brier", "accuracy", "ece"):
        for etype in ensemble_types:
            fig, ax = plt.subplots(figsize=(5.0, 3.4))
            for method in methods:
                try:
                    curve = aggregate_rows(rows, etype, method)
                except ValidationError:
                    continue
                mean = curve.means[metric]
                std = curve.stds[metric]
                ax.plot(curve.sizes, mean, marker="o", markersize=3, label=method)
                ax.fill_between(curve.sizes, mean - std, mean + std, alpha=0.2)
            ax.set_xlabel("number of models")
            ax.set_ylabel(metric)
            ax.set_title(f"{metric} — {etype} ensembles")
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = report_dir / f"{metric}_{etype}.svg"
            fig.savefig(path, format="svg")
            plt.close(fig)
            written.append(path)
    return written
