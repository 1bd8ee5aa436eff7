import math

import numpy as np
import pytest

from spam.data_metrics import RawTable, make_split
from spam.errors import NonFiniteError
from spam.neural_feats import init_bank
from spam.optimize import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    grad_check,
    l1_basis_penalty,
    lambda_dropout,
    loss,
    objective_and_grads,
    predict_logits,
    train,
)
from spam.poly_core import RankSpec, active_interactions, init_params, zeros_params


def regression_split(X, y, seed=0):
    return make_split(RawTable(X, y, [f"x{i}" for i in range(X.shape[1])]), "regression", seed, 1, "y")


class TestLosses:
    def test_mse_zero(self):
        assert loss("mse", np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    @pytest.mark.parametrize("C", [2, 5, 10])
    def test_uniform_softmax(self, C):
        assert loss("softmax-cross-entropy", np.zeros((3, C)), [0, 1, C - 1]) == pytest.approx(math.log(C))

    def test_logistic_at_zero(self):
        assert loss("binary-logistic", np.zeros(4), [0, 1, 1, 0]) == pytest.approx(math.log(2))
        assert loss("binary-logistic", np.zeros(2), [-1, 1]) == pytest.approx(math.log(2))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss("softmax-cross-entropy", np.zeros((2, 3)), [0, 3])
        with pytest.raises(ValueError):
            loss("binary-logistic", np.zeros(2), [0, 2])

    def test_large_logits_stable(self):
        assert math.isfinite(loss("binary-logistic", np.array([800.0, -800.0]), [0, 1]))
        assert math.isfinite(loss("softmax-cross-entropy", np.array([[900.0, -900.0]]), [1]))


class TestPenalty:
    def test_zero(self):
        assert l1_basis_penalty(zeros_params(3, 1, RankSpec.from_ranks([2]))) == 0.0

    def test_arithmetic_and_homogeneity(self):
        params = zeros_params(3, 1, RankSpec.from_ranks([1]))
        params.bases[2][:] = [[1.0, -2.0, 3.0]]
        assert l1_basis_penalty(params) == 6.0
        params.bases[2] *= 2
        assert l1_basis_penalty(params) == 12.0

    def test_order_one_weights_excluded(self):
        params = zeros_params(3, 1, RankSpec.from_ranks([]))
        params.order1[:] = 5.0
        assert l1_basis_penalty(params) == 0.0


class TestDropout:
    def test_identity_cases(self, rng):
        lam = rng.normal(size=10)
        assert lambda_dropout(lam, 0.0, rng) is lam
        assert lambda_dropout(lam, 0.9, rng, training=False) is lam

    def test_expectation(self):
        rng = np.random.default_rng(0)
        lam = np.array([0.5, -1.5, 2.0])
        draws = np.stack([lambda_dropout(lam, 0.5, rng) for _ in range(100_000)])
        np.testing.assert_allclose(draws.mean(axis=0), lam, rtol=0.02)
        assert set(np.unique(draws[:, 0])) == {0.0, 1.0}

    def test_rejects_p_one(self, rng):
        with pytest.raises(ValueError):
            lambda_dropout(np.ones(3), 1.0, rng)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.1, 0.001) == 0.1
        assert cosine_lr(100, 100, 0.1, 0.001) == pytest.approx(0.001, abs=1e-15)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 0.2) == pytest.approx(0.1, abs=1e-15)


class TestAdamW:
    def test_decoupled_decay(self):
        theta = {"w": np.array([1.0, -2.0, 4.0])}
        state = OptimizerState.for_arrays(theta)
        for _ in range(3):
            adamw_step(state, theta, {"w": np.zeros(3)}, lr=0.01, weight_decay=0.1)
        np.testing.assert_allclose(theta["w"], np.array([1.0, -2.0, 4.0]) * 0.999**3, rtol=1e-14)

    def test_constant_gradient_step_size(self):
        theta = {"w": np.array([0.0, 0.0])}
        state = OptimizerState.for_arrays(theta)
        g = {"w": np.array([3.0, -0.2])}
        for _ in range(100):
            before = theta["w"].copy()
            adamw_step(state, theta, g, lr=0.01)
        step = theta["w"] - before
        np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-6)

    def test_convex_projection(self):
        theta = {"w": np.array([0.001, 1.0])}
        state = OptimizerState.for_arrays(theta)
        adamw_step(state, theta, {"w": np.array([1.0, 1.0])}, lr=0.1, convex_mode=True)
        assert theta["w"][0] == 0.0 and theta["w"][1] > 0

    def test_nan_gradient(self):
        theta = {"w": np.zeros(3)}
        with pytest.raises(NonFiniteError) as info:
            adamw_step(OptimizerState.for_arrays(theta), theta, {"w": np.array([0.0, np.nan, 0.0])}, lr=0.1)
        assert info.value.diagnostics["index"] == [1]


class TestGradCheck:
    def test_linear_mse(self, rng):
        params = init_params(4, 1, RankSpec.from_ranks([]), seed=0)
        assert grad_check(params, rng.random((8, 4)), rng.normal(size=8), "mse") <= 1e-6

    def test_order3_softmax(self, rng):
        params = init_params(4, 3, RankSpec.from_ranks([3, 2]), seed=1, singular_scale=1.0)
        X, y = rng.random((8, 4)), rng.integers(0, 3, size=8)
        assert grad_check(params, X, y, "softmax-cross-entropy") <= 1e-4

    def test_neural_order2(self, rng):
        bank = init_bank("deep", 3, 2, seed=2)
        params = init_params(3, 1, RankSpec.from_ranks([2]), seed=3, singular_scale=1.0)
        assert grad_check(params, rng.random((6, 3)), rng.normal(size=6), "mse", bank=bank) <= 1e-4

    def test_l1_penalty_gradient(self, rng):
        params = init_params(3, 1, RankSpec.from_ranks([2]), seed=4)
        assert grad_check(params, rng.random((6, 3)), rng.normal(size=6), "mse", beta_reg=0.3) <= 1e-4

    @pytest.mark.parametrize("C,d,r", [(1, 3, 5), (3, 2, 8)])
    def test_gram_path_matches_direct(self, C, d, r, rng, monkeypatch):
        import spam.optimize as opt

        params = init_params(d, C, RankSpec.from_ranks([r]), seed=5, singular_scale=1.0)
        assert opt._use_gram(params, 2)
        X = rng.random((10, d))
        y = rng.integers(0, C, size=10) if C > 1 else rng.normal(size=10)
        kind = "softmax-cross-entropy" if C > 1 else "mse"
        v1, g1, _ = objective_and_grads(params, X, y, kind, beta_reg=0.1)
        monkeypatch.setattr(opt, "_use_gram", lambda *a: False)
        v2, g2, _ = objective_and_grads(params, X, y, kind, beta_reg=0.1)
        assert v1 == pytest.approx(v2, abs=1e-13)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=0, atol=1e-12)


class TestTrain:
    def test_sqrt_product_target(self):
        rng = np.random.default_rng(0)
        X = rng.random((2000, 2))
        data = regression_split(X, 3.0 * np.sqrt(X[:, 0] * X[:, 1]) + 0.5)
        params = init_params(2, 1, RankSpec.from_ranks([2]), seed=0)
        params.bias[:] = data.y_train.mean()
        res = train(params, data, TrainConfig(lr0=0.01, epochs=200, batch_size=256))
        pred = predict_logits(res.params, data.X_train)[:, 0]
        assert math.sqrt(np.mean((pred - data.y_train) ** 2)) < 0.02

    def test_linear_recovery(self):
        rng = np.random.default_rng(1)
        X = rng.random((2000, 3))
        w = np.array([0.7, -1.2, 0.4])
        data = regression_split(X, X @ w + 0.3)
        res = train(init_params(3, 1, RankSpec.from_ranks([]), seed=0), data, TrainConfig(lr0=0.05, epochs=200, batch_size=256))
        # features are rescaled to [0, 1] per column, so map weights back
        span = data.norm_stats.maximum - data.norm_stats.minimum
        assert np.max(np.abs(res.params.order1[0] / span - w)) < 1e-2

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        X = rng.random((300, 3))
        data = regression_split(X, X.sum(axis=1))
        cfg = TrainConfig(lr0=0.01, epochs=5, batch_size=64, lambda_dropout_p=0.3, seed=7)
        p = init_params(3, 1, RankSpec.from_ranks([4]), seed=0)
        a, b = train(p, data, cfg), train(p, data, cfg)
        for name, arr in a.params.arrays().items():
            assert np.array_equal(arr, b.params.arrays()[name])
        assert a.history == b.history

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(3)
        X = rng.random((100, 2))
        p = init_params(2, 1, RankSpec.from_ranks([2]), seed=0)
        before = {k: v.copy() for k, v in p.arrays().items()}
        train(p, regression_split(X, X[:, 0]), TrainConfig(epochs=2, batch_size=32))
        assert all(np.array_equal(before[k], v) for k, v in p.arrays().items())

    def test_history_format(self):
        rng = np.random.default_rng(4)
        X = rng.random((100, 2))
        res = train(init_params(2, 1, RankSpec.from_ranks([]), seed=0), regression_split(X, X[:, 1]),
                    TrainConfig(epochs=3, batch_size=32))
        assert [sorted(h) for h in res.history] == [["epoch", "lr", "train_loss", "val_metric"]] * 3
        assert res.best_val == min(h["val_metric"] for h in res.history)

    def test_divergence_reports_batch(self):
        rng = np.random.default_rng(5)
        X = rng.random((200, 2))
        data = regression_split(X, 1e200 * X[:, 0])
        with pytest.raises(NonFiniteError) as info:
            train(init_params(2, 1, RankSpec.from_ranks([1]), seed=0), data, TrainConfig(epochs=2, batch_size=50))
        assert "batch_index" in info.value.diagnostics

    def test_convex_mode_nonnegative(self):
        rng = np.random.default_rng(6)
        X = rng.random((200, 3))
        data = regression_split(X, 1.0 + X.sum(axis=1))
        p = init_params(3, 1, RankSpec.from_ranks([3]), seed=0, nonnegative=True)
        res = train(p, data, TrainConfig(lr0=0.05, epochs=20, batch_size=64, convex_mode=True))
        assert all(np.all(a >= 0) for a in res.params.arrays().values())

    def test_l1_shrinks_interactions(self):
        rng = np.random.default_rng(7)
        X = rng.random((1000, 5))
        y = X.sum(axis=1) + np.sqrt(X[:, 0] * X[:, 1])
        data = regression_split(X, y)
        counts = []
        for beta in (0.0, 1e-2, 1e-1, 1.0):
            p = init_params(5, 1, RankSpec.from_ranks([4]), seed=0)
            cfg = TrainConfig(lr0=0.01, epochs=300, batch_size=1000, beta_reg=beta)
            counts.append(len(active_interactions(train(p, data, cfg).params, tau=1e-3).pairs))
        assert counts == sorted(counts, reverse=True)
        assert counts[-1] < counts[0]


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"batch_size": 2048}, {"lr0": 0.0}, {"lambda_dropout_p": 1.0}, {"loss_kind": "hinge"}, {"epochs": 0}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
