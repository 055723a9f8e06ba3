import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from femodels.errors import ConfigError, NumericError, ShapeError
from femodels.mlp_regressor import (
    DnnParams, MlpRegressor, OptimState, backward_and_step, train_epochs,
)

import oracles


def _mse_loss(y):
    def batch_loss(rows, out):
        r = out[:, 0] - y[rows]
        return float(np.mean(r * r)), (2.0 * r / rows.size)[:, None]
    return batch_loss


class TestForward:
    def test_output_shape(self):
        net = MlpRegressor(3, [4, 5], 2)
        assert net.forward(np.zeros((7, 3))).shape == (7, 2)

    def test_input_width_checked(self):
        with pytest.raises(ShapeError):
            MlpRegressor(3, [4], 1).forward(np.zeros((2, 2)))

    def test_scaler_standardises(self):
        X = np.random.default_rng(0).normal(3.0, 5.0, size=(100, 2))
        net = MlpRegressor(2, [3], 1)
        net.fit_scaler(X)
        h = (X - net.input_mean) / net.input_scale
        np.testing.assert_allclose(h.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(h.std(axis=0), 1, atol=1e-12)

    def test_init_is_seeded_and_bounded(self):
        a, b = MlpRegressor(16, [8], 1, seed=3), MlpRegressor(16, [8], 1, seed=3)
        np.testing.assert_array_equal(a.layers[0]["W"], b.layers[0]["W"])
        assert np.abs(a.layers[0]["W"]).max() <= 1 / 4

    def test_eval_mode_is_deterministic_with_dropout(self):
        net = MlpRegressor(2, [8], 1, dropout=0.5)
        X = np.ones((3, 2))
        np.testing.assert_array_equal(net.forward(X), net.forward(X))

    def test_dropout_needs_rng(self):
        with pytest.raises(ConfigError):
            MlpRegressor(2, [8], 1, dropout=0.5).forward(np.ones((3, 2)), train=True)


class TestBackward:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_finite_differences(self, seed):
        assert oracles.check_mlp_backprop(np.random.default_rng(seed)) <= 1e-4

    def test_before_forward(self):
        with pytest.raises(ShapeError):
            MlpRegressor(2, [2], 1).backward(np.zeros((1, 1)))


class TestAdam:
    def test_first_step_size_is_learning_rate(self):
        # bias-corrected Adam moves each parameter by ~lr on the first step
        net = MlpRegressor(1, [2], 1, seed=0)
        before = [p.copy() for _, _, p in net.parameters()]
        state = OptimState(net, learning_rate=0.01)
        net.forward(np.array([[0.3], [-0.2]]), train=True)
        backward_and_step(net, state, np.ones((2, 1)))
        for b, (_, _, p) in zip(before, net.parameters()):
            moved = np.abs(p - b)
            assert np.all((moved < 1e-12) | (np.abs(moved - 0.01) < 1e-6))

    def test_quadratic_toy_converges(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(256, 1))
        y = 3.0 * X[:, 0] - 1.0
        net = MlpRegressor(1, [8], 1, activation="tanh", seed=1)
        hp = DnnParams(layer_sizes=[8], batch_size=32, learning_rate=0.01, max_epochs=150)
        report = train_epochs(net, X, _mse_loss(y), hp)
        assert report.train_loss[-1] < 1e-2 * report.train_loss[0]

    def test_zero_learning_rate_keeps_losses_constant(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(64, 2))
        y = X[:, 0]
        net = MlpRegressor(2, [4], 1, seed=2)
        hp = DnnParams(layer_sizes=[4], batch_size=16, learning_rate=0.0, max_epochs=5)
        report = train_epochs(net, X, _mse_loss(y), hp, train_loss=lambda: np.mean((net.forward(X)[:, 0] - y) ** 2))
        assert len(set(report.train_loss)) == 1

    def test_non_finite_gradient_names_layer(self):
        net = MlpRegressor(1, [2], 1)
        net.forward(np.ones((1, 1)), train=True)
        with pytest.raises(NumericError, match="layer"):
            backward_and_step(net, OptimState(net), np.array([[np.nan]]), batch_index=7)

    def test_gradient_shape(self):
        net = MlpRegressor(1, [2], 1)
        net.forward(np.ones((3, 1)), train=True)
        with pytest.raises(ShapeError):
            backward_and_step(net, OptimState(net), np.zeros((2, 1)))

    def test_l2_shrinks_weights(self):
        X = np.zeros((32, 2))
        y = np.zeros(32)
        kw = dict(layer_sizes=[4], batch_size=32, learning_rate=0.01, max_epochs=20)
        a, b = MlpRegressor(2, [4], 1, seed=5), MlpRegressor(2, [4], 1, seed=5)
        train_epochs(a, X, _mse_loss(y), DnnParams(**kw))
        train_epochs(b, X, _mse_loss(y), DnnParams(lambda_l2=0.5, **kw))
        assert np.abs(b.layers[0]["W"]).sum() < np.abs(a.layers[0]["W"]).sum()


class TestEarlyStopping:
    def test_stops_after_patience_and_restores_best(self):
        X = np.zeros((8, 1))
        net = MlpRegressor(1, [2], 1)
        scripted = iter([5.0, 4.0, 3.0, 3.5, 3.6, 3.7, 3.8, 1.0])
        snapshots = []
        hp = DnnParams(layer_sizes=[2], batch_size=8, max_epochs=8, patience=3)
        report = train_epochs(
            net, X, lambda rows, out: (0.0, np.zeros_like(out)), hp,
            valid_loss=lambda: next(scripted),
            on_epoch_end=lambda e: snapshots.append(net.get_state()),
        )
        # epochs 4..7 fail to improve on epoch 3; the 4th miss exceeds patience
        assert report.epochs_run == 7 and report.best_epoch == 3
        assert report.valid_loss == [5.0, 4.0, 3.0, 3.5, 3.6, 3.7, 3.8]

    def test_serialisation(self):
        net = MlpRegressor(3, [4], 2, activation="sigmoid", batch_norm=True)
        X = np.random.default_rng(0).normal(size=(5, 3))
        net.forward(X, train=True)
        back = MlpRegressor.from_dict(net.to_dict())
        np.testing.assert_array_equal(back.forward(X), net.forward(X))


class TestParams:
    @pytest.mark.parametrize("kw", [{"activation": "gelu"}, {"dropout": 0.95}, {"layer_sizes": []},
                                    {"lambda_l1": 2.0}, {"max_epochs": 500}])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            DnnParams(**kw).validate()
