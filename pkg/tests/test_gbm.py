import json

import numpy as np
import pytest

from tds import gbm
from tds.dataset import BINARY_CLASSIFICATION, REGRESSION

from conftest import make_ensemble, make_stump


def _full_batch(n_estimators=20, max_depth=3, **kw):
    return gbm.GbmConfig(
        n_estimators=n_estimators,
        max_depth=max_depth,
        subsample=1.0,
        colsample_bytree=1.0,
        **kw,
    )


class TestFit:
    def test_constant_targets_predict_the_constant(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 3))
        y = np.full(40, 2.5)
        ens = gbm.fit(X, y, REGRESSION, _full_batch())
        assert np.allclose(gbm.predict_margin(ens, X), 2.5)
        for tree in ens.trees:
            assert np.allclose(tree.value, 0.0)

    def test_tree_count_matches_config(self, reg_ensemble):
        assert reg_ensemble.n_trees == reg_ensemble.config.n_estimators

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((80, 4))
        y = rng.standard_normal(80)
        cfg = gbm.GbmConfig(n_estimators=10, max_depth=3, seed=42)
        a = gbm.fit(X, y, REGRESSION, cfg)
        b = gbm.fit(X, y, REGRESSION, cfg)
        assert gbm.to_json(a) == gbm.to_json(b)

    def test_newton_leaf_weights(self):
        # one split on feature 0; residuals at base=5 are [5,5,-5,-5],
        # unit hessians, lambda=1 -> leaf values -G/(H+lambda) = -/+ 10/3
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        cfg = _full_batch(n_estimators=1, max_depth=1, learning_rate=1.0)
        ens = gbm.fit(X, y, REGRESSION, cfg)
        tree = ens.trees[0]
        assert tree.feature[0] == 0
        assert tree.threshold[0] == pytest.approx(0.5)
        left, right = tree.left[0], tree.right[0]
        assert tree.value[left] == pytest.approx(-10.0 / 3.0, abs=1e-9)
        assert tree.value[right] == pytest.approx(10.0 / 3.0, abs=1e-9)
        assert tree.cover[left] == pytest.approx(2.0)

    def test_full_batch_training_loss_non_increasing(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((200, 5))
        y = X[:, 0] * 2 + rng.standard_normal(200)
        ens = gbm.fit(X, y, REGRESSION, _full_batch(n_estimators=40, max_depth=4))
        traj = gbm.trajectory_batch(ens, X)
        mse = ((traj - y[:, None]) ** 2).mean(axis=0)
        assert np.all(np.diff(mse) <= 1e-12)

    def test_single_class_errors(self):
        X = np.zeros((10, 2))
        with pytest.raises(ValueError, match="single class"):
            gbm.fit(X, np.ones(10), BINARY_CLASSIFICATION, _full_batch())

    def test_non_finite_features_error(self):
        X = np.zeros((10, 2))
        X[3, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            gbm.fit(X, np.zeros(10), REGRESSION, _full_batch())

    def test_classification_base_score_is_log_odds(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((100, 3))
        y = (rng.random(100) < 0.25).astype(float)
        ens = gbm.fit(X, y, BINARY_CLASSIFICATION, _full_batch(n_estimators=1))
        rate = y.mean()
        assert ens.base_score == pytest.approx(np.log(rate / (1 - rate)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            gbm.GbmConfig(n_estimators=0)
        with pytest.raises(ValueError):
            gbm.GbmConfig(subsample=0.0)
        with pytest.raises(ValueError):
            gbm.GbmConfig(colsample_bytree=1.5)


class TestOutputs:
    def test_raw_output_is_last_trajectory_element(self, reg_ensemble, reg_data):
        x = reg_data.dataset.features[0]
        traj = gbm.trajectory(reg_ensemble, x)
        assert len(traj) == reg_ensemble.n_trees
        assert gbm.raw_output(reg_ensemble, x) == pytest.approx(traj[-1], abs=1e-12)

    def test_prefix_sum_consistency(self, reg_ensemble, reg_data):
        X = reg_data.dataset.features[:5]
        traj = gbm.trajectory_batch(reg_ensemble, X)
        lr = reg_ensemble.learning_rate
        for t, tree in enumerate(reg_ensemble.trees):
            step = lr * tree.predict(X)
            prev = traj[:, t - 1] if t else np.full(len(X), reg_ensemble.base_score)
            assert np.allclose(traj[:, t] - prev, step, atol=1e-9)

    def test_batched_trajectories_match_per_row_walk(self, reg_ensemble, reg_data):
        # oracle: walk each tree for a single row at a time
        def walk(tree, x):
            i = 0
            while tree.feature[i] >= 0:
                i = tree.left[i] if x[tree.feature[i]] < tree.threshold[i] else tree.right[i]
            return tree.value[i]

        X = reg_data.dataset.features[:7]
        batch = gbm.trajectory_batch(reg_ensemble, X)
        for r, x in enumerate(X):
            acc = reg_ensemble.base_score
            for t, tree in enumerate(reg_ensemble.trees):
                acc += reg_ensemble.learning_rate * walk(tree, x)
                assert batch[r, t] == pytest.approx(acc, abs=1e-12)

    def test_empty_ensemble_returns_base_score(self):
        ens = make_ensemble([], base_score=1.25)
        assert gbm.raw_output(ens, np.zeros(3)) == 1.25

    def test_single_leaf_tree(self):
        stump = make_stump(0, 0.0, -2.0, 3.0, 5, 5)
        ens = make_ensemble([stump], base_score=1.0, learning_rate=0.5)
        assert gbm.raw_output(ens, np.array([-1.0])) == pytest.approx(1.0 + 0.5 * -2.0)
        assert gbm.raw_output(ens, np.array([1.0])) == pytest.approx(1.0 + 0.5 * 3.0)

    def test_include_base_flag(self, reg_ensemble, reg_data):
        X = reg_data.dataset.features[:3]
        with_base = gbm.trajectory_batch(reg_ensemble, X, include_base=True)
        without = gbm.trajectory_batch(reg_ensemble, X, include_base=False)
        assert np.allclose(with_base - without, reg_ensemble.base_score)

    def test_dimension_mismatch(self, reg_ensemble):
        with pytest.raises(ValueError, match="dimension"):
            gbm.raw_output(reg_ensemble, np.zeros(3))

    def test_predict_proba_uses_temperature(self, cls_ensemble, cls_data):
        X = cls_data.dataset.features[:4]
        margins = gbm.predict_margin(cls_ensemble, X)
        expected = 1 / (1 + np.exp(-margins / cls_ensemble.temperature))
        assert np.allclose(gbm.predict_proba(cls_ensemble, X), expected)


class TestTemperature:
    def test_recovers_unit_temperature(self):
        # margins drawn from the same logistic model they calibrate
        rng = np.random.default_rng(0)
        z = rng.normal(0.0, 2.0, size=20000)
        y = (rng.random(20000) < 1 / (1 + np.exp(-z))).astype(float)
        tau = gbm.fit_temperature(z, y)
        assert abs(tau - 1.0) < 0.05

    def test_margin_scaling_scales_tau(self):
        rng = np.random.default_rng(1)
        z = rng.normal(0.0, 1.5, size=8000)
        y = (rng.random(8000) < 1 / (1 + np.exp(-z))).astype(float)
        tau = gbm.fit_temperature(z, y)
        tau3 = gbm.fit_temperature(3.0 * z, y)
        assert tau3 == pytest.approx(3.0 * tau, abs=1e-3)

    def test_nll_no_worse_than_unit_temperature(self, cls_ensemble, cls_data, cls_splits):
        ds = cls_data.dataset
        X = ds.features[cls_splits.calibration]
        y = ds.targets[cls_splits.calibration]
        margins = gbm.predict_margin(cls_ensemble, X)
        assert gbm._nll(margins, y, cls_ensemble.temperature) <= gbm._nll(margins, y, 1.0) + 1e-12

    def test_single_class_calibration_errors(self, cls_ensemble, cls_data):
        X = cls_data.dataset.features[:10]
        with pytest.raises(ValueError, match="both classes"):
            gbm.temperature_scale(cls_ensemble, X, np.ones(10))

    def test_regression_task_errors(self, reg_ensemble, reg_data):
        X = reg_data.dataset.features[:10]
        with pytest.raises(ValueError, match="classification"):
            gbm.temperature_scale(reg_ensemble, X, np.zeros(10))


class TestSerialization:
    def test_round_trip_predictions(self, reg_ensemble, reg_data):
        clone = gbm.from_json(gbm.to_json(reg_ensemble))
        X = reg_data.dataset.features[:20]
        assert np.array_equal(gbm.predict_margin(clone, X), gbm.predict_margin(reg_ensemble, X))

    def test_round_trip_bytes_stable(self, reg_ensemble):
        text = gbm.to_json(reg_ensemble)
        assert gbm.to_json(gbm.from_json(text)) == text

    def test_version_tag_checked(self):
        doc = {"format_version": 99}
        with pytest.raises(ValueError, match="version"):
            gbm.from_json(json.dumps(doc))

    def test_fingerprint_ignores_temperature(self, cls_ensemble):
        import dataclasses

        rescaled = dataclasses.replace(cls_ensemble, temperature=5.0)
        rescaled._n_features = cls_ensemble._n_features
        assert gbm.fingerprint(rescaled) == gbm.fingerprint(cls_ensemble)

    def test_fingerprint_differs_across_models(self, reg_ensemble, cls_ensemble):
        assert gbm.fingerprint(reg_ensemble) != gbm.fingerprint(cls_ensemble)
