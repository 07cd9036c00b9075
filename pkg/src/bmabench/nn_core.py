"""Minimal dense/convolutional classifier with hand-written reverse-mode gradients.

Networks are immutable value objects: a tuple of layer descriptors plus one
flat parameter vector partitioned per layer. The final two layers must be a
``Dense`` head followed by ``Softmax``; that dense layer is the "last layer"
that the variational and MCMC machinery treats separately from the frozen
backbone.

Everything here is plain numpy. Training runs in whatever dtype the network
weights carry (float32 by default; tests use float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DimensionError, ValidationError

__all__ = [
    "Conv2d",
    "Dense",
    "Relu",
    "Flatten",
    "Softmax",
    "Network",
    "Dataset",
    "ScheduleState",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "build_network",
    "cosine_schedule",
    "constant_schedule",
    "lr_at",
    "forward",
    "penultimate_features",
    "cross_entropy",
    "grad",
    "sgd_step",
    "train",
    "batches_per_epoch",
]


# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    """Valid-padding 2-D convolution, square kernel."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Softmax:
    """Row-wise softmax; only valid as the final layer."""


def _param_count(spec) -> int:
    if isinstance(spec, Conv2d):
        return spec.out_channels * spec.in_channels * spec.kernel_size ** 2 + spec.out_channels
    if isinstance(spec, Dense):
        return spec.in_features * spec.out_features + spec.out_features
    return 0


def _fan_in(spec) -> int:
    if isinstance(spec, Conv2d):
        return spec.in_channels * spec.kernel_size ** 2
    if isinstance(spec, Dense):
        return spec.in_features
    return 0


def infer_shapes(layers: Sequence, input_shape: tuple) -> list[tuple]:
    """Propagate the per-example shape through the layer stack.

    Raises DimensionError when a layer cannot consume its input shape.
    """
    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for i, spec in enumerate(layers):
        if isinstance(spec, Conv2d):
            if len(cur) != 3 or cur[0] != spec.in_channels:
                raise DimensionError(f"layer {i}: conv2d expects ({spec.in_channels}, H, W), got {cur}")
            _, h, w = cur
            k, s = spec.kernel_size, spec.stride
            if h < k or w < k:
                raise DimensionError(f"layer {i}: input {h}x{w} smaller than kernel {k}")
            cur = (spec.out_channels, (h - k) // s + 1, (w - k) // s + 1)
        elif isinstance(spec, Dense):
            if len(cur) != 1 or cur[0] != spec.in_features:
                raise DimensionError(f"layer {i}: dense expects ({spec.in_features},), got {cur}")
            cur = (spec.out_features,)
        elif isinstance(spec, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(spec, (Relu, Softmax)):
            pass
        else:
            raise ValidationError(f"unknown layer descriptor: {spec!r}")
        shapes.append(cur)
    return shapes


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Network:
    """Layer stack plus one flat, read-only parameter vector."""

    layers: tuple
    input_shape: tuple
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.layers) < 2 or not isinstance(self.layers[-1], Softmax):
            raise ValidationError("network must end with a Softmax output layer")
        if not isinstance(self.layers[-2], Dense):
            raise ValidationError("the layer before Softmax must be Dense (the last layer)")
        if any(isinstance(spec, Softmax) for spec in self.layers[:-1]):
            raise ValidationError("Softmax is only valid as the final layer")
        shapes = infer_shapes(self.layers, self.input_shape)
        object.__setattr__(self, "_shapes", shapes)
        w = np.asarray(self.weights)
        if w.ndim != 1:
            raise DimensionError("weights must be a flat vector")
        n = sum(_param_count(spec) for spec in self.layers)
        if w.size != n:
            raise DimensionError(f"weight vector has {w.size} entries, architecture needs {n}")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def n_params(self) -> int:
        return self.weights.size

    @property
    def n_classes(self) -> int:
        return self.layers[-2].out_features

    @property
    def feature_dim(self) -> int:
        """Width of the activations feeding the last dense layer."""
        return self.layers[-2].in_features

    def spans(self) -> list[tuple[int, int] | None]:
        """Per-layer (start, end) slices into the flat weight vector."""
        out, offset = [], 0
        for spec in self.layers:
            n = _param_count(spec)
            out.append((offset, offset + n) if n else None)
            offset += n
        return out

    @property
    def last_layer_span(self) -> tuple[int, int]:
        return self.spans()[-2]

    def last_layer_weights(self) -> np.ndarray:
        lo, hi = self.last_layer_span
        return self.weights[lo:hi].copy()

    def backbone_weights(self) -> np.ndarray:
        lo, hi = self.last_layer_span
        return np.concatenate([self.weights[:lo], self.weights[hi:]])

    def with_weights(self, weights: np.ndarray) -> "Network":
        return Network(self.layers, self.input_shape, weights)

    def with_last_layer(self, theta: np.ndarray) -> "Network":
        lo, hi = self.last_layer_span
        theta = np.asarray(theta, dtype=self.weights.dtype)
        if theta.shape != (hi - lo,):
            raise DimensionError(f"last layer needs {hi - lo} parameters, got {theta.shape}")
        w = self.weights.copy()
        w[lo:hi] = theta
        return self.with_weights(w)

    def _layer_params(self, index: int):
        """(W, b) views for the parameterized layer at ``index``."""
        spec = self.layers[index]
        lo, hi = self.spans()[index]
        flat = self.weights[lo:hi]
        if isinstance(spec, Conv2d):
            k = spec.kernel_size
            nw = spec.out_channels * spec.in_channels * k * k
            return (
                flat[:nw].reshape(spec.out_channels, spec.in_channels, k, k),
                flat[nw:],
            )
        if isinstance(spec, Dense):
            nw = spec.in_features * spec.out_features
            return flat[:nw].reshape(spec.in_features, spec.out_features), flat[nw:]
        raise ValidationError(f"layer {index} has no parameters")


def build_network(layers: Sequence, input_shape: tuple, seed: int, dtype=np.float32) -> Network:
    """Initialize with fan-in scaled uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for spec in layers:
        n = _param_count(spec)
        if n == 0:
            continue
        fan = _fan_in(spec)
        bound = 1.0 / np.sqrt(fan)
        if isinstance(spec, Conv2d):
            n_bias = spec.out_channels
        else:
            n_bias = spec.out_features
        w = rng.uniform(-bound, bound, size=n - n_bias)
        chunks.append(np.concatenate([w, np.zeros(n_bias)]))
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return Network(tuple(layers), tuple(input_shape), flat.astype(dtype))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, oh, ow, C*k*k) patches, valid padding."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, oh, ow, k, k)
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * k * k)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the input. dcols: (N, oh, ow, C*k*k)."""
    n, c, h, w = x_shape
    oh, ow = dcols.shape[1], dcols.shape[2]
    d = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[:, :, :, :, i, j]
    return dx


def _check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=net.weights.dtype)
    if x.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input shape {net.input_shape}")
    return x


def _forward_pass(net: Network, x: np.ndarray, keep_caches: bool):
    """Run all layers up to (and excluding) the final Softmax; return logits."""
    caches = [] if keep_caches else None
    a = x
    for i, spec in enumerate(net.layers[:-1]):
        if isinstance(spec, Conv2d):
            wt, b = net._layer_params(i)
            cols = _im2col(a, spec.kernel_size, spec.stride)
            n, oh, ow, _ = cols.shape
            z = cols.reshape(n * oh * ow, -1) @ wt.reshape(spec.out_channels, -1).T + b
            if keep_caches:
                caches.append((cols, a.shape))
            a = z.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)
        elif isinstance(spec, Dense):
            wt, b = net._layer_params(i)
            if keep_caches:
                caches.append(a)
            a = a @ wt + b
        elif isinstance(spec, Relu):
            if keep_caches:
                caches.append(a > 0)
            a = np.maximum(a, 0)
        elif isinstance(spec, Flatten):
            if keep_caches:
                caches.append(a.shape)
            a = a.reshape(a.shape[0], -1)
    return a, caches


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per example. Deterministic given weights."""
    x = _check_batch(net, batch)
    logits, _ = _forward_pass(net, x, keep_caches=False)
    return _softmax_rows(logits)


def penultimate_features(net: Network, batch: np.ndarray) -> np.ndarray:
    """Activations feeding the last dense layer, shape (N, feature_dim)."""
    x = _check_batch(net, batch)
    a = x
    for i, spec in enumerate(net.layers[:-2]):
        if isinstance(spec, Conv2d):
            wt, b = net._layer_params(i)
            cols = _im2col(a, spec.kernel_size, spec.stride)
            n, oh, ow, _ = cols.shape
            z = cols.reshape(n * oh * ow, -1) @ wt.reshape(spec.out_channels, -1).T + b
            a = z.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)
        elif isinstance(spec, Dense):
            wt, b = net._layer_params(i)
            a = a @ wt + b
        elif isinstance(spec, Relu):
            a = np.maximum(a, 0)
        elif isinstance(spec, Flatten):
            a = a.reshape(a.shape[0], -1)
    return a


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise DimensionError("labels must be a 1-D vector of class indices")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the labels under the network."""
    x = _check_batch(net, batch)
    y = _check_labels(labels, net.n_classes)
    logits, _ = _forward_pass(net, x, keep_caches=False)
    logp = _log_softmax_rows(logits)
    return float(-logp[np.arange(y.size), y].mean())


def _loss_and_grad(net: Network, x: np.ndarray, y: np.ndarray):
    logits, caches = _forward_pass(net, x, keep_caches=True)
    logp = _log_softmax_rows(logits)
    n = y.size
    loss = float(-logp[np.arange(n), y].mean())

    probs = np.exp(logp)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    g = np.zeros_like(net.weights)
    spans = net.spans()
    for i in range(len(net.layers) - 2, -1, -1):
        spec = net.layers[i]
        cache = caches.pop()
        if isinstance(spec, Dense):
            a_in = cache
            wt, _ = net._layer_params(i)
            lo, hi = spans[i]
            nw = spec.in_features * spec.out_features
            g[lo : lo + nw] = (a_in.T @ delta).ravel()
            g[lo + nw : hi] = delta.sum(axis=0)
            delta = delta @ wt.T
        elif isinstance(spec, Relu):
            delta = delta * cache
        elif isinstance(spec, Flatten):
            delta = delta.reshape(cache)
        elif isinstance(spec, Conv2d):
            cols, x_shape = cache
            n_b, oh, ow, _ = cols.shape
            d = delta.transpose(0, 2, 3, 1).reshape(n_b * oh * ow, spec.out_channels)
            cols2 = cols.reshape(n_b * oh * ow, -1)
            lo, hi = spans[i]
            k = spec.kernel_size
            nw = spec.out_channels * spec.in_channels * k * k
            g[lo : lo + nw] = (d.T @ cols2).ravel()
            g[lo + nw : hi] = d.sum(axis=0)
            wt, _ = net._layer_params(i)
            dcols = d @ wt.reshape(spec.out_channels, -1)
            delta = _col2im(dcols.reshape(n_b, oh, ow, -1), x_shape, k, spec.stride)
    return loss, g


def grad(net: Network, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy over the batch w.r.t. all weights."""
    x = _check_batch(net, batch)
    y = _check_labels(labels, net.n_classes)
    _, g = _loss_and_grad(net, x, y)
    return g


def sgd_step(weights: np.ndarray, g: np.ndarray, rate: float) -> np.ndarray:
    """Plain SGD update w - rate * g. No momentum, no weight decay."""
    w = np.asarray(weights)
    g = np.asarray(g)
    if w.shape != g.shape:
        raise DimensionError(f"weights {w.shape} and gradient {g.shape} differ")
    return w - rate * g


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


@dataclass
class ScheduleState:
    """Batch-indexed learning-rate state.

    ``decaying`` mode follows the half-cosine from the initial rate down to
    zero over ``total_batches`` ticks; ``constant`` mode ignores the counter.
    """

    mode: str
    initial_rate: float = 0.0
    total_batches: int = 0
    batch: int = 0
    constant_rate: float = 0.0

    def tick(self) -> None:
        self.batch += 1


def cosine_schedule(initial_rate: float, total_batches: int) -> ScheduleState:
    if initial_rate <= 0 or total_batches < 1:
        raise ValidationError("cosine schedule needs initial_rate > 0 and total_batches >= 1")
    return ScheduleState(mode="decaying", initial_rate=initial_rate, total_batches=total_batches)


def constant_schedule(rate: float) -> ScheduleState:
    if rate < 0:
        raise ValidationError("constant rate must be nonnegative")
    return ScheduleState(mode="constant", constant_rate=rate)


def lr_at(s: ScheduleState) -> float:
    """Current learning rate; half-cosine decay or the fixed constant."""
    if s.mode == "constant":
        return s.constant_rate
    if s.mode != "decaying":
        raise ValidationError(f"unknown schedule mode {s.mode!r}")
    if s.batch > s.total_batches:
        raise ValidationError(f"batch counter {s.batch} exceeds schedule length {s.total_batches}")
    half = 0.5 * s.initial_rate
    return half * np.cos(np.pi * s.batch / s.total_batches) + half


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Feature/label pair; features shaped (N, *input_shape)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DimensionError("features and labels disagree on length")

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    max_epochs: int
    patience: int
    rng_seed: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.patience < 0:
            raise ValidationError("patience must be >= 0")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass(frozen=True)
class TrainHistory:
    epochs: tuple[EpochRecord, ...]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    epoch_weights: tuple[np.ndarray, ...] | None = None


def batches_per_epoch(n_examples: int, batch_size: int) -> int:
    return -(-n_examples // batch_size)


def train(
    net: Network,
    train_set: Dataset,
    val_set: Dataset,
    schedule: ScheduleState,
    cfg: TrainConfig,
    early_stopping: bool = True,
    keep_epoch_weights: bool = False,
) -> tuple[Network, TrainHistory]:
    """SGD with per-batch schedule ticks and early stopping on validation loss.

    Returns the weights observed at the best validation loss. With
    ``early_stopping=False``, runs exactly ``max_epochs`` epochs and returns
    the final weights (the trajectory stage needs raw end-of-run iterates);
    ``keep_epoch_weights`` additionally records the weight vector at the end
    of every epoch in the history.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("train and validation sets must be nonempty")
    _check_labels(train_set.y, net.n_classes)
    _check_labels(val_set.y, net.n_classes)

    rng = np.random.default_rng(cfg.rng_seed)
    weights = net.weights.copy()
    best_weights = weights.copy()
    best_val = np.inf
    best_epoch = -1
    since_best = 0
    stopped_early = False
    records = []
    snapshots = [] if keep_epoch_weights else None

    n = len(train_set)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rate = lr_at(schedule)
            loss, g = _loss_and_grad(net.with_weights(weights), train_set.x[idx], train_set.y[idx])
            weights = sgd_step(weights, g, rate)
            schedule.tick()
            batch_losses.append(loss)

        cur = net.with_weights(weights)
        val_loss = cross_entropy(cur, val_set.x, val_set.y)
        val_probs = forward(cur, val_set.x)
        val_acc = float((val_probs.argmax(axis=1) == val_set.y).mean())
        records.append(EpochRecord(float(np.mean(batch_losses)), val_loss, val_acc))
        if keep_epoch_weights:
            snapshots.append(weights.copy())

        if val_loss < best_val:
            best_val = val_loss
            best_weights = weights.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if early_stopping and since_best > cfg.patience:
                stopped_early = True
                break

    snaps = tuple(snapshots) if keep_epoch_weights else None
    if not early_stopping:
        final = net.with_weights(weights)
        return final, TrainHistory(tuple(records), best_epoch, float(best_val), False, snaps)
    return (
        net.with_weights(best_weights),
        TrainHistory(tuple(records), best_epoch, float(best_val), stopped_early, snaps),
    )
