import dataclasses

import numpy as np
import pytest

from cdev.observables import ObservableRecord
from cdev.signal import DataError
from cdev.surrogate import (
    SurrogateConfig,
    consistency_scan,
    design_matrix,
    fit_gbrt,
    outcome_curve,
    permutation_importance,
)

CFG = SurrogateConfig(seed=99)


def make_regression(n=400, n_features=6, fn=None, noise=0.0, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, n_features))
    y = fn(X) if fn else np.zeros(n)
    if noise:
        y = y + rng.normal(0, noise, n)
    return X, y


class TestFitGbrt:
    def test_constant_target_zero_trees(self):
        X, y = make_regression(fn=lambda X: np.full(len(X), 4.25))
        model = fit_gbrt(X, y, CFG, max_leaves=8)
        assert len(model.trees) == 0
        assert np.all(model.predict(X) == 4.25)
        assert model.val_mse == 0.0

    def test_linear_signal_high_r2(self):
        X, y = make_regression(n=800, fn=lambda X: 3.0 * X[:, 0])
        model = fit_gbrt(X, y, CFG, max_leaves=13)
        val = model.val_rows
        resid = y[val] - model.predict(X[val])
        r2 = 1.0 - np.mean(resid**2) / np.var(y[val])
        assert r2 > 0.99

    def test_recorded_improvements_non_increasing(self):
        X, y = make_regression(n=500, fn=lambda X: np.sin(3 * X[:, 1]), noise=0.05)
        model = fit_gbrt(X, y, CFG, max_leaves=8)
        mses = [m for _, m in model.improvements]
        assert all(b < a for a, b in zip(mses, mses[1:]))
        assert model.best_iteration == model.improvements[-1][0]
        assert len(model.trees) == model.best_iteration

    def test_deterministic(self):
        X, y = make_regression(n=300, fn=lambda X: X[:, 0] ** 2, noise=0.1)
        a = fit_gbrt(X, y, CFG, max_leaves=5)
        b = fit_gbrt(X, y, CFG, max_leaves=5)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))

    def test_grouped_split_keeps_units_together(self):
        X, y = make_regression(n=600, fn=lambda X: X[:, 2], noise=0.01)
        groups = np.repeat(np.arange(60), 10)
        model = fit_gbrt(X, y, CFG, max_leaves=5, groups=groups)
        val_units = set(groups[model.val_rows])
        train_units = set(groups) - val_units
        assert val_units.isdisjoint(train_units)
        assert len(model.val_rows) == 10 * len(val_units)

    def test_too_few_rows(self):
        X, y = make_regression(n=20, fn=lambda X: X[:, 0])
        with pytest.raises(DataError, match="50"):
            fit_gbrt(X, y, CFG, max_leaves=4)

    def test_nonfinite_rejected(self):
        X, y = make_regression(n=100, fn=lambda X: X[:, 0])
        X[3, 2] = np.nan
        with pytest.raises(DataError):
            fit_gbrt(X, y, CFG, max_leaves=4)


class TestPermutationImportance:
    def test_constant_model_all_zero(self):
        X, y = make_regression(fn=lambda X: np.full(len(X), 1.0))
        model = fit_gbrt(X, y, CFG, max_leaves=4)
        imp = permutation_importance(model, X, y, CFG)
        assert np.all(imp == 0.0)

    def test_single_informative_feature_dominates(self):
        X, y = make_regression(n=600, fn=lambda X: 2.0 * X[:, 0], noise=0.02)
        model = fit_gbrt(X, y, CFG, max_leaves=8)
        imp = permutation_importance(model, X, y, CFG)
        assert np.argmax(imp) == 0
        assert imp[0] > np.delete(imp, 0).max()

    def test_repeat_count_stable_argmax(self):
        X, y = make_regression(n=600, fn=lambda X: 2.0 * X[:, 0], noise=0.02)
        model = fit_gbrt(X, y, CFG, max_leaves=8)
        one = permutation_importance(model, X, y, dataclasses.replace(CFG, permutation_repeats=1))
        ten = permutation_importance(model, X, y, dataclasses.replace(CFG, permutation_repeats=10))
        assert np.argmax(one) == np.argmax(ten) == 0

    def test_deterministic(self):
        X, y = make_regression(n=300, fn=lambda X: X[:, 1], noise=0.05)
        model = fit_gbrt(X, y, CFG, max_leaves=5)
        a = permutation_importance(model, X, y, CFG)
        b = permutation_importance(model, X, y, CFG)
        np.testing.assert_array_equal(a, b)


def synthetic_records(n_units=80, doses=10, effect=True, seed=5):
    """Records where bit 0's dose drives spectral_mean_hz if effect else not."""
    rng = np.random.default_rng(seed)
    covariates = rng.uniform(-1, 1, (n_units, 12))
    records = []
    for unit in range(n_units):
        for d in range(doses):
            dose = float(d)
            base = 5000.0 + 40.0 * covariates[unit, 0]
            y = base + (150.0 * dose if effect else 0.0) + rng.normal(0, 30.0)
            records.append(
                ObservableRecord(unit, 0, dose, 5, None, None, float(y), None, None)
            )
    return records, covariates


class TestConsistencyScan:
    def test_planted_effect_consistent(self):
        records, covariates = synthetic_records(effect=True)
        report = consistency_scan(records, covariates, 0, "spectral_mean_hz", CFG, n_bits=2)
        assert report.consistent
        assert report.verdict == "CONSISTENT"
        qualifying = [e for e in report.entries if e.qualifying]
        assert qualifying and all(e.treatment_rank == 1 for e in qualifying)

    def test_shuffled_outcome_not_consistent(self):
        records, covariates = synthetic_records(effect=True, seed=6)
        rng = np.random.default_rng(0)
        values = rng.permutation([r.spectral_mean_hz for r in records])
        shuffled = [
            dataclasses.replace(r, spectral_mean_hz=float(v)) for r, v in zip(records, values)
        ]
        report = consistency_scan(shuffled, covariates, 0, "spectral_mean_hz", CFG, n_bits=2)
        assert not report.consistent

    def test_small_strata_skipped(self):
        records, covariates = synthetic_records(n_units=20, doses=3)
        records = [dataclasses.replace(r, mean_ici=0.1, n_clicks=3 + r.unit_id % 2) for r in records]
        cfg = dataclasses.replace(CFG, max_leaves_grid=(2, 3))
        report = consistency_scan(records, covariates, 0, "mean_ici", cfg, n_bits=2)
        assert set(report.skipped_strata) == {3, 4}
        assert not report.consistent  # nothing evaluated

    def test_design_matrix_layout(self):
        records, covariates = synthetic_records(n_units=3, doses=2)
        X, y, groups = design_matrix(records, covariates, 0, "spectral_mean_hz", n_bits=2)
        assert X.shape == (6, 2 + 12)
        np.testing.assert_array_equal(X[:, 1], 0.0)  # unused slot
        assert set(X[:, 0]) == {0.0, 1.0}
        assert len(y) == 6 and len(groups) == 6


class TestOutcomeCurve:
    def test_matches_empirical_on_strong_signal(self):
        records, covariates = synthetic_records(effect=True, n_units=100)
        X, y, groups = design_matrix(records, covariates, 0, "spectral_mean_hz", n_bits=2)
        model = fit_gbrt(X, y, CFG, max_leaves=13, groups=groups)
        doses, predicted = outcome_curve(model, X, dose_col=0)
        for dose, pred in zip(doses, predicted):
            empirical = y[X[:, 0] == dose].mean()
            assert pred == pytest.approx(empirical, rel=0.05)
