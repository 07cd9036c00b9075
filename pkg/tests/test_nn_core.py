"""Core network tests: schedules, forward/backward, SGD training."""

import numpy as np
import pytest

from bmabench import container, nn_core as nc
from bmabench.exceptions import DimensionError, FormatError, ValidationError


def tiny_dense_net(seed=0, dtype=np.float64, hidden=8, n_classes=3, in_dim=2):
    layers = [nc.Dense(in_dim, hidden), nc.Relu(), nc.Dense(hidden, n_classes), nc.Softmax()]
    return nc.build_network(layers, (in_dim,), seed=seed, dtype=dtype)


def fd_gradient(net, x, y, h=1e-5):
    """Central-difference gradient of the mean cross-entropy."""
    w = net.weights.copy()
    g = np.zeros_like(w)
    for i in range(w.size):
        wp = w.copy()
        wp[i] += h
        wm = w.copy()
        wm[i] -= h
        g[i] = (
            nc.cross_entropy(net.with_weights(wp), x, y)
            - nc.cross_entropy(net.with_weights(wm), x, y)
        ) / (2 * h)
    return g


class TestSchedule:
    def test_cosine_endpoints_and_midpoint(self):
        s = nc.cosine_schedule(0.1, 50000)
        assert nc.lr_at(s) == pytest.approx(0.1, abs=1e-12)
        s.batch = 25000
        assert nc.lr_at(s) == pytest.approx(0.05, abs=1e-12)
        s.batch = 50000
        assert nc.lr_at(s) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_nonincreasing(self):
        s = nc.cosine_schedule(0.1, 1000)
        rates = []
        for b in range(0, 1001):
            s.batch = b
            rates.append(nc.lr_at(s))
        assert np.all(np.diff(rates) <= 1e-15)
        assert all(0.0 <= r <= 0.1 for r in rates)

    def test_counter_past_end_rejected(self):
        s = nc.cosine_schedule(0.1, 10)
        s.batch = 11
        with pytest.raises(ValidationError):
            nc.lr_at(s)

    def test_constant_mode(self):
        s = nc.constant_schedule(1e-4)
        assert nc.lr_at(s) == 1e-4
        s.batch = 12345
        assert nc.lr_at(s) == 1e-4


class TestForward:
    def test_zero_weights_give_uniform_rows(self):
        net = tiny_dense_net()
        net = net.with_weights(np.zeros(net.n_params))
        p = nc.forward(net, np.random.default_rng(0).normal(size=(7, 2)))
        np.testing.assert_allclose(p, np.full((7, 3), 1 / 3), atol=1e-12)

    def test_identity_selecting_dense_matches_hand_softmax(self):
        # single dense layer picking coordinates of a one-hot input
        layers = [nc.Dense(3, 3), nc.Softmax()]
        w = np.zeros(3 * 3 + 3)
        w[: 9] = np.eye(3).ravel()
        net = nc.Network(tuple(layers), (3,), w)
        x = np.eye(3)[[1]]
        p = nc.forward(net, x)
        z = np.array([0.0, 1.0, 0.0])
        expected = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(p[0], expected, atol=1e-12)

    def test_deterministic(self):
        net = tiny_dense_net(seed=3)
        x = np.random.default_rng(1).normal(size=(11, 2))
        a = nc.forward(net, x)
        b = nc.forward(net, x)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        net = tiny_dense_net()
        with pytest.raises(DimensionError):
            nc.forward(net, np.zeros((4, 5)))

    def test_rows_are_probability_vectors(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            net = tiny_dense_net(seed=seed)
            p = nc.forward(net, rng.normal(size=(20, 2)) * 3)
            assert np.all(p > 0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_conv_shapes(self):
        layers = [
            nc.Conv2d(3, 4, 3, stride=2), nc.Relu(), nc.Flatten(),
            nc.Dense(4 * 3 * 3, 5), nc.Relu(), nc.Dense(5, 10), nc.Softmax(),
        ]
        net = nc.build_network(layers, (3, 7, 7), seed=0)
        p = nc.forward(net, np.random.default_rng(0).normal(size=(2, 3, 7, 7)).astype(np.float32))
        assert p.shape == (2, 10)

    def test_penultimate_features_zero_input(self):
        net = tiny_dense_net()
        feats = nc.penultimate_features(net, np.zeros((4, 2)))
        # zero input through zero-bias ReLU backbone stays zero
        np.testing.assert_allclose(feats, 0.0, atol=1e-12)
        assert feats.shape == (4, 8)


class TestGrad:
    def test_softmax_linear_closed_form(self):
        # one dense layer: grad of mean CE is features^T (p - onehot) / N
        rng = np.random.default_rng(5)
        layers = [nc.Dense(4, 3), nc.Softmax()]
        net = nc.build_network(layers, (4,), seed=2, dtype=np.float64)
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, 3, 6)
        p = nc.forward(net, x)
        resid = p.copy()
        resid[np.arange(6), y] -= 1.0
        resid /= 6
        expected = np.concatenate([(x.T @ resid).ravel(), resid.sum(axis=0)])
        np.testing.assert_allclose(nc.grad(net, x, y), expected, atol=1e-12)

    def test_matches_finite_differences_dense(self):
        rng = np.random.default_rng(0)
        # 2-layer net with ~50 weights
        layers = [nc.Dense(3, 6), nc.Relu(), nc.Dense(6, 4), nc.Softmax()]
        net = nc.build_network(layers, (3,), seed=9, dtype=np.float64)
        assert net.n_params <= 60
        x = rng.normal(size=(8, 3))
        y = rng.integers(0, 4, 8)
        ga = nc.grad(net, x, y)
        gf = fd_gradient(net, x, y)
        rel = np.abs(ga - gf) / (np.abs(gf) + 1e-8)
        assert rel.max() < 1e-4

    def test_matches_finite_differences_conv(self):
        rng = np.random.default_rng(1)
        layers = [
            nc.Conv2d(1, 2, 3, stride=2), nc.Relu(), nc.Flatten(),
            nc.Dense(2 * 3 * 3, 5), nc.Relu(), nc.Dense(5, 4), nc.Softmax(),
        ]
        net = nc.build_network(layers, (1, 7, 7), seed=4, dtype=np.float64)
        x = rng.normal(size=(5, 1, 7, 7))
        y = rng.integers(0, 4, 5)
        ga = nc.grad(net, x, y)
        gf = fd_gradient(net, x, y)
        rel = np.abs(ga - gf) / (np.abs(gf) + 1e-8)
        assert rel.max() < 1e-4

    def test_saturated_correct_prediction_has_tiny_gradient(self):
        layers = [nc.Dense(2, 2), nc.Softmax()]
        w = np.zeros(2 * 2 + 2)
        w[:4] = np.array([[50.0, -50.0], [-50.0, 50.0]]).ravel()
        net = nc.Network(tuple(layers), (2,), w)
        x = np.array([[1.0, 0.0]])
        y = np.array([0])
        assert np.linalg.norm(nc.grad(net, x, y)) < 1e-6

    def test_label_out_of_range(self):
        net = tiny_dense_net()
        with pytest.raises(ValidationError):
            nc.grad(net, np.zeros((1, 2)), np.array([3]))


class TestSgdStep:
    def test_zero_rate_keeps_weights(self):
        w = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(nc.sgd_step(w, np.ones(3), 0.0), w)

    def test_arithmetic(self):
        out = nc.sgd_step(np.array([1.0, 1.0]), np.array([1.0, -1.0]), 0.5)
        np.testing.assert_allclose(out, [0.5, 1.5], atol=1e-15)

    def test_two_steps_compose_linearly(self):
        w = np.array([0.3, -0.7])
        g1, g2 = np.array([1.0, 2.0]), np.array([-0.5, 0.25])
        once = nc.sgd_step(nc.sgd_step(w, g1, 0.1), g2, 0.1)
        combined = w - 0.1 * (g1 + g2)
        np.testing.assert_allclose(once, combined, atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            nc.sgd_step(np.zeros(3), np.zeros(4), 0.1)


def separable_toy(n=20, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.stack([(y * 2.0 - 1.0) * 2.0 + 0.2 * rng.standard_normal(n),
                  0.3 * rng.standard_normal(n)], axis=1)
    return nc.Dataset(x.astype(np.float64), y.astype(np.int64))


class TestTrain:
    def test_separable_toy_reaches_full_accuracy(self):
        data = separable_toy()
        train, val = data.take(np.arange(0, 16)), data.take(np.arange(16, 20))
        net = tiny_dense_net(seed=1, n_classes=2)
        sched = nc.cosine_schedule(0.5, 50 * nc.batches_per_epoch(len(train), 8))
        cfg = nc.TrainConfig(batch_size=8, max_epochs=50, patience=10, rng_seed=0)
        trained, hist = nc.train(net, train, val, sched, cfg)
        probs = nc.forward(trained, train.x)
        assert (probs.argmax(axis=1) == train.y).mean() == 1.0

    def test_patience_zero_stops_right_after_worsening(self):
        data = separable_toy(seed=3)
        train, val = data.take(np.arange(0, 16)), data.take(np.arange(16, 20))
        net = tiny_dense_net(seed=2, n_classes=2)
        # a large constant rate oscillates, so validation worsens quickly
        sched = nc.constant_schedule(5.0)
        cfg = nc.TrainConfig(batch_size=8, max_epochs=30, patience=0, rng_seed=1)
        _, hist = nc.train(net, train, val, sched, cfg)
        assert hist.stopped_early
        # with patience 0, training ends one epoch after the best one
        assert len(hist.epochs) == hist.best_epoch + 2

    def test_same_seed_reproduces_weights_and_history(self):
        data = separable_toy(seed=5)
        train, val = data.take(np.arange(0, 16)), data.take(np.arange(16, 20))

        def run():
            net = tiny_dense_net(seed=8, n_classes=2)
            sched = nc.cosine_schedule(0.3, 10 * nc.batches_per_epoch(16, 4))
            cfg = nc.TrainConfig(batch_size=4, max_epochs=10, patience=10, rng_seed=42)
            return nc.train(net, train, val, sched, cfg)

        n1, h1 = run()
        n2, h2 = run()
        assert np.array_equal(n1.weights, n2.weights)
        assert h1 == h2

    def test_returned_weights_hit_best_val_loss(self):
        data = separable_toy(seed=9)
        train, val = data.take(np.arange(0, 14)), data.take(np.arange(14, 20))
        net = tiny_dense_net(seed=3, n_classes=2)
        sched = nc.cosine_schedule(0.4, 20 * nc.batches_per_epoch(14, 4))
        cfg = nc.TrainConfig(batch_size=4, max_epochs=20, patience=3, rng_seed=7)
        trained, hist = nc.train(net, train, val, sched, cfg)
        val_loss = nc.cross_entropy(trained, val.x, val.y)
        assert val_loss == pytest.approx(hist.best_val_loss, abs=1e-12)
        assert val_loss <= min(e.val_loss for e in hist.epochs) + 1e-12

    def test_empty_dataset_rejected(self):
        data = separable_toy()
        empty = nc.Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
        net = tiny_dense_net(n_classes=2)
        with pytest.raises(ValidationError):
            nc.train(net, empty, data, nc.constant_schedule(0.1),
                     nc.TrainConfig(4, 5, 1, 0))


class TestCheckpointFile:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        layers = [
            nc.Conv2d(1, 2, 3, stride=2), nc.Relu(), nc.Flatten(),
            nc.Dense(2 * 3 * 3, 5), nc.Relu(), nc.Dense(5, 4), nc.Softmax(),
        ]
        net = nc.build_network(layers, (1, 7, 7), seed=0)
        path = tmp_path / "ck.bin"
        container.save_checkpoint(path, net)
        loaded = container.load_checkpoint(path, layers, (1, 7, 7))
        x = np.random.default_rng(0).normal(size=(3, 1, 7, 7)).astype(np.float32)
        np.testing.assert_allclose(nc.forward(net, x), nc.forward(loaded, x), atol=1e-6)
        assert loaded.last_layer_span == net.last_layer_span

    def test_magic_and_truncation_rejected(self, tmp_path):
        net = tiny_dense_net(dtype=np.float32)
        path = tmp_path / "ck.bin"
        container.save_checkpoint(path, net)
        raw = path.read_bytes()
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            container.load_checkpoint(bad, net.layers, net.input_shape)
        trunc = tmp_path / "trunc.bin"
        trunc.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            container.load_checkpoint(trunc, net.layers, net.input_shape)
