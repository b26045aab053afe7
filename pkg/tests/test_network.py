import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntk_selective.network import (
    NetworkParams,
    TrainConfig,
    feature_gram,
    feature_map,
    forward,
    forward_batch,
    gradient,
    gradient_batch,
    init_network,
    param_count,
    train_loss,
    train_nn,
)
from ntk_selective.ntk import ntk_matrix

from conftest import unit_rows


def naive_forward(x, weights):
    """Straightforward re-implementation, one layer at a time."""
    a = np.asarray(x, dtype=float)
    for W in weights[:-1]:
        a = np.array([max(0.0, float(row @ a)) for row in W])
    m = weights[0].shape[0]
    return math.sqrt(m) * float(weights[-1][0] @ a)


class TestInit:
    def test_param_count(self):
        net = init_network(6, 8, 3, seed=0)
        assert net.param_count == param_count(6, 8, 3) == 8 + 8 * 6 + 64
        assert net.shapes == [(8, 6), (8, 8), (1, 8)]

    def test_same_seed_bitwise(self):
        a, b = init_network(4, 16, 3, seed=42), init_network(4, 16, 3, seed=42)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_variance_frozen(self):
        m = 1024
        net = init_network(8, m, 2, seed=3)
        assert net.weights[0].var() == pytest.approx(2.0 / m, rel=0.1)
        assert net.weights[1].var() == pytest.approx(1.0 / m, rel=0.2)

    def test_nonfrozen_zero_output(self):
        for seed in range(20):
            net = init_network(6, 16, 3, seed=seed, variant="nonfrozen")
            X = unit_rows(np.random.default_rng(seed), 100, 6)
            assert np.max(np.abs(forward_batch(X, net))) < 1e-10

    def test_nonfrozen_structure(self):
        net = init_network(3, 8, 2, seed=1, variant="nonfrozen")
        W1 = net.weights[0]
        assert W1.shape == (8, 6)
        np.testing.assert_array_equal(W1[:4, :3], W1[4:, 3:])
        assert np.all(W1[:4, 3:] == 0)
        np.testing.assert_array_equal(net.weights[1][0, :4], -net.weights[1][0, 4:])

    def test_nonfrozen_needs_even_width(self):
        with pytest.raises(ValueError, match="even"):
            init_network(3, 7, 2, seed=0, variant="nonfrozen")

    def test_preconditions(self):
        with pytest.raises(ValueError):
            init_network(3, 1, 2, seed=0)
        with pytest.raises(ValueError):
            init_network(3, 4, 1, seed=0)
        with pytest.raises(ValueError):
            init_network(3, 4, 2, seed=0, variant="wide")

    def test_weights_read_only(self):
        net = init_network(3, 4, 2, seed=0)
        with pytest.raises(ValueError):
            net.weights[0][0, 0] = 1.0

    def test_save_load(self, tmp_path):
        net = init_network(3, 6, 3, seed=5, variant="nonfrozen")
        net = net.with_theta(net.theta + 0.01)
        net.save(tmp_path / "w.npz")
        back = NetworkParams.load(tmp_path / "w.npz")
        np.testing.assert_array_equal(back.theta, net.theta)
        np.testing.assert_array_equal(back.theta0, net.theta0)
        assert back.duplicate_input


class TestForward:
    def test_zero_input(self):
        assert forward(np.zeros(5), init_network(5, 8, 3, seed=0)) == 0.0

    def test_hand_network(self):
        net = NetworkParams((np.array([[1.0]]), np.array([[1.0]])), 1, 2, 1)
        assert forward(np.array([0.5]), net) == 0.5

    def test_matches_naive(self, rng):
        net = init_network(5, 12, 4, seed=9)
        for x in unit_rows(rng, 10, 5):
            assert forward(x, net) == pytest.approx(naive_forward(x, net.weights), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            forward(np.ones(3), init_network(4, 4, 2, seed=0))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_positive_homogeneity_depth2(self, c, seed):
        net = init_network(4, 8, 2, seed=seed)
        x = unit_rows(np.random.default_rng(seed), 1, 4)[0]
        assert forward(c * x, net) == pytest.approx(c * forward(x, net), rel=1e-9, abs=1e-12)


class TestGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        net = init_network(4, 8, 3, seed=11)
        x = unit_rows(rng, 1, 4)[0]
        g = gradient(x, net)
        theta = net.theta
        idx = rng.choice(theta.size, size=50, replace=False)
        h = 1e-5
        for k in idx:
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            fd = (forward(x, net.with_theta(tp)) - forward(x, net.with_theta(tm))) / (2 * h)
            assert abs(fd - g[k]) <= 1e-5 * max(abs(fd), abs(g[k]), 1e-3)

    def test_zero_input_zero_gradient(self):
        assert np.all(gradient(np.zeros(3), init_network(3, 6, 3, seed=0)) == 0)

    def test_last_layer_block(self, rng):
        net = init_network(3, 6, 3, seed=2)
        x = unit_rows(rng, 1, 3)[0]
        a = x
        for W in net.weights[:-1]:
            a = np.maximum(W @ a, 0.0)
        g = gradient(x, net)
        np.testing.assert_allclose(g[-6:], math.sqrt(6) * a, atol=1e-14)

    def test_batch_matches_single(self, rng):
        net = init_network(3, 5, 3, seed=4)
        X = unit_rows(rng, 4, 3)
        G = gradient_batch(X, net)
        for k in range(4):
            np.testing.assert_allclose(G[k], gradient(X[k], net), rtol=1e-13, atol=1e-15)


class TestFeatures:
    def test_frozen_map_is_constant(self, rng):
        net = init_network(4, 8, 2, seed=0)
        moved = net.with_theta(net.theta + 0.1)
        x = unit_rows(rng, 1, 4)[0]
        np.testing.assert_array_equal(feature_map(x, moved), feature_map(x, net))
        assert not np.array_equal(feature_map(x, moved, at="current"), feature_map(x, net))

    def test_bad_snapshot_name(self):
        with pytest.raises(ValueError):
            feature_map(np.ones(2) / math.sqrt(2), init_network(2, 4, 2, seed=0), at="latest")

    def test_gram_identity(self, rng):
        net = init_network(3, 10, 3, seed=1)
        X = unit_rows(rng, 5, 3)
        G = feature_map(X, net)
        np.testing.assert_allclose(feature_gram(X, net), G @ G.T, rtol=1e-12, atol=1e-12)

    def test_gram_approaches_ntk(self):
        X = unit_rows(np.random.default_rng(0), 6, 4)
        H = ntk_matrix(X, 2).H
        err = lambda m: np.mean([np.linalg.norm(feature_gram(X, init_network(4, m, 2, seed=s)) - H)
                                 for s in range(10)])
        assert err(2048) < err(64)


class TestTrain:
    def _problem(self, seed=0, l=1, m=4):
        rng = np.random.default_rng(seed)
        net = init_network(3, m, 2, seed=seed)
        X = unit_rows(rng, l, 3)
        losses = rng.integers(0, 2, size=l)
        return net, X, losses

    def test_zero_steps(self):
        net, X, losses = self._problem()
        out = train_nn(TrainConfig(0.01, 0, 4), X, losses, net)
        np.testing.assert_array_equal(out.theta, net.theta)

    def test_no_data_is_fixed_point(self):
        net, _, _ = self._problem()
        out = train_nn(TrainConfig(0.01, 50, 4), [], [], net)
        np.testing.assert_array_equal(out.theta, net.theta)

    def test_matches_independent_gd(self):
        """Trajectory against a hand-derived gradient for a depth-2 network."""
        m = 4
        net, X, losses = self._problem(seed=3, l=1, m=m)
        eta, J = 0.01 / m, 200
        W1, w2 = net.weights[0].copy(), net.weights[1][0].copy()
        W1_0, w2_0 = W1.copy(), w2.copy()
        x, ell = X[0], float(losses[0])
        for _ in range(J):
            z = W1 @ x
            a = np.maximum(z, 0)
            r = math.sqrt(m) * w2 @ a - 1 + ell
            g2 = r * math.sqrt(m) * a + 2 * m * (w2 - w2_0)
            g1 = r * math.sqrt(m) * np.outer(w2 * (z > 0), x) + 2 * m * (W1 - W1_0)
            W1, w2 = W1 - eta * g1, w2 - eta * g2
        out = train_nn(TrainConfig(eta, J, m), X, losses, net)
        np.testing.assert_allclose(out.theta, np.concatenate([W1.ravel(), w2]), atol=1e-8)

    def test_loss_never_increases(self):
        for seed in range(5):
            net, X, losses = self._problem(seed=seed, l=10, m=8)
            hist = []
            # eta * m = 0.004 keeps every step contractive on these instances
            train_nn(TrainConfig(0.0005, 100, 8), X, losses, net, loss_history=hist)
            assert len(hist) == 101
            assert np.all(np.diff(hist) <= 1e-12)
            assert hist[-1] < hist[0]

    def test_loss_at_anchor(self):
        net, X, losses = self._problem(l=3)
        resid = forward_batch(X, net) - 1 + losses
        assert train_loss(net, X, losses, net.theta) == pytest.approx(0.5 * resid @ resid)

    def test_config_stability_guard(self):
        with pytest.raises(ValueError, match="eta"):
            TrainConfig(eta=0.5, J=10, m=4)
        cfg = TrainConfig.default(m=64, n=2, T=500)
        assert cfg.eta == pytest.approx(0.5 / (64 * 2 * 500))
        assert cfg.J == 100

    def test_length_mismatch(self):
        net, X, _ = self._problem(l=2)
        with pytest.raises(ValueError):
            train_nn(TrainConfig(0.01, 1, 4), X, [0], net)
