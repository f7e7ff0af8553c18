#!/usr/bin/env python3
"""
Tests for Epsilon-SVR
=====================
SMO against a dense QP oracle, prediction, grid search and model files.
"""

import numpy as np
import pytest
from scipy.optimize import minimize

from affectcae.errors import CheckpointError, ParameterError, ShapeError
from affectcae.svr import (
    KernelColumns,
    fit_svr,
    grid_search,
    kernel_matrix,
    load_svr,
    predict_svr,
    save_svr,
    solve_dual,
)


def oracle_dual(k, y, C, eps):
    """Dense SLSQP solution of the epsilon-SVR dual in (a+, a-) form; returns (objective, coefficients)."""
    n = len(y)

    def objective(a):
        beta = a[:n] - a[n:]
        return 0.5 * beta @ k @ beta + eps * a.sum() - y @ beta

    def gradient(a):
        beta = a[:n] - a[n:]
        g = k @ beta
        return np.concatenate([g + eps - y, -g + eps + y])

    result = minimize(
        objective,
        np.zeros(2 * n),
        jac=gradient,
        method="SLSQP",
        bounds=[(0.0, C)] * (2 * n),
        constraints=[{"type": "eq", "fun": lambda a: a[:n].sum() - a[n:].sum(), "jac": lambda a: np.r_[np.ones(n), -np.ones(n)]}],
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    return result.fun, result.x[:n] - result.x[n:]


@pytest.fixture
def linear_data():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((80, 4))
    y = x @ np.array([0.4, -0.2, 0.1, 0.0]) + rng.normal(0, 0.05, 80)
    return x, y


class TestDualSolver:
    """Test SMO against a brute-force QP"""

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            d = int(rng.integers(1, 4))
            x = rng.standard_normal((n, d))
            y = rng.uniform(-1, 1, n)
            C = float(10 ** rng.uniform(-1, 2))
            eps = float(rng.uniform(0.0, 0.2))
            k = kernel_matrix(x, x)

            solution = solve_dual(KernelColumns(x, "linear", 1.0), y, C, eps, tol=1e-8)
            oracle_objective, oracle_coef = oracle_dual(k, y, C, eps)

            assert solution.converged
            assert solution.objective <= oracle_objective + 1e-6
            assert solution.objective == pytest.approx(oracle_objective, abs=1e-3)
            # the linear weight vector is unique, so predictions minus bias agree
            np.testing.assert_allclose(k @ solution.coefficients, k @ oracle_coef, atol=1e-3)

    def test_dual_feasibility(self, linear_data):
        x, y = linear_data
        solution = solve_dual(KernelColumns(x, "linear", 1.0), y, C=1.0, epsilon=0.05, tol=1e-6)
        assert solution.coefficients.sum() == pytest.approx(0.0, abs=1e-10)
        assert np.all(solution.alpha >= 0.0) and np.all(solution.alpha <= 1.0)

    def test_iteration_cap_reports_not_converged(self, linear_data):
        x, y = linear_data
        solution = solve_dual(KernelColumns(x, "linear", 1.0), y, C=10.0, epsilon=0.0, tol=1e-12, max_iter=3)
        assert not solution.converged
        assert solution.iterations == 3

    def test_kernel_columns_cached(self, linear_data):
        x, _ = linear_data
        columns = KernelColumns(x, "rbf", 0.5, cache_size=2)
        first = columns.column(3)
        assert columns.column(3) is first
        columns.column(4)
        columns.column(5)
        assert 3 not in columns._cache
        np.testing.assert_allclose(columns.diagonal, 1.0)


class TestFitPredict:
    """Test model fitting and prediction"""

    def test_two_point_fit_within_tube(self):
        x = np.array([[0.0], [1.0]])
        y = np.array([0.0, 1.0])
        model = fit_svr(x, y, C=100.0, epsilon=0.1, tol=1e-8)
        pred = predict_svr(model, x)
        assert np.all(np.abs(pred - y) <= 0.1 + 1e-6)

    def test_linear_recovery(self, linear_data):
        x, y = linear_data
        model = fit_svr(x, y, C=1.0, epsilon=0.01)
        assert model.converged
        assert np.corrcoef(predict_svr(model, x), y)[0, 1] > 0.95

    def test_rbf_kernel(self):
        x = np.linspace(-3, 3, 60)[:, None]
        y = np.sin(x[:, 0])
        model = fit_svr(x, y, C=10.0, epsilon=0.01, kernel="rbf", gamma=1.0)
        assert np.max(np.abs(predict_svr(model, x) - y)) < 0.1

    def test_zero_variance_columns_dropped(self, linear_data, caplog):
        x, y = linear_data
        x = np.hstack([x, np.full((len(x), 1), 3.0)])
        model = fit_svr(x, y)
        assert model.kept.tolist() == [True, True, True, True, False]
        assert "zero-variance" in caplog.text
        assert predict_svr(model, x).shape == (len(x),)

    def test_column_rescaling_does_not_change_predictions(self, linear_data):
        x, y = linear_data
        rescaled = x.copy()
        rescaled[:, 1] = 7.5 * x[:, 1] - 3.0
        a = predict_svr(fit_svr(x, y, C=1.0, epsilon=0.01, tol=1e-8), x)
        b = predict_svr(fit_svr(rescaled, y, C=1.0, epsilon=0.01, tol=1e-8), rescaled)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_feature_width_checked(self, linear_data):
        x, y = linear_data
        model = fit_svr(x, y)
        with pytest.raises(ShapeError):
            predict_svr(model, x[:, :3])

    @pytest.mark.parametrize("kwargs", [{"C": 0.0}, {"epsilon": -0.1}, {"kernel": "poly"}])
    def test_bad_parameters(self, linear_data, kwargs):
        x, y = linear_data
        with pytest.raises(ParameterError):
            fit_svr(x, y, **kwargs)

    def test_too_few_rows(self):
        with pytest.raises(ShapeError):
            fit_svr(np.ones((1, 2)), np.ones(1))


class TestGridSearch:
    """Test the CCC-driven grid search"""

    def test_picks_best_dev_ccc(self, linear_data):
        x, y = linear_data
        report = grid_search(x[:60], y[:60], x[60:], y[60:], c_grid=[0.01, 1.0], epsilon_grid=[0.01, 0.1])
        assert len(report.cells) == 4
        assert report.chosen.dev_ccc == max(c.dev_ccc for c in report.cells)
        assert [(c.C, c.epsilon) for c in report.cells] == [(0.01, 0.01), (0.01, 0.1), (1.0, 0.01), (1.0, 0.1)]

    def test_ties_prefer_smaller_parameters(self):
        # epsilon wider than the target spread: every cell predicts a constant (CCC 0)
        x = np.arange(10, dtype=np.float64)[:, None]
        y = np.tile([0.0, 0.01], 5)
        report = grid_search(x, y, x, y, c_grid=[10.0, 1.0], epsilon_grid=[0.5, 0.2])
        assert all(c.dev_ccc == 0.0 for c in report.cells)
        assert (report.chosen.C, report.chosen.epsilon) == (1.0, 0.2)

    def test_parallel_matches_serial(self, linear_data):
        x, y = linear_data
        serial = grid_search(x[:60], y[:60], x[60:], y[60:], c_grid=[0.1, 1.0], epsilon_grid=[0.01, 0.05])
        parallel = grid_search(x[:60], y[:60], x[60:], y[60:], c_grid=[0.1, 1.0], epsilon_grid=[0.01, 0.05], jobs=3)
        assert [c.dev_ccc for c in serial.cells] == [c.dev_ccc for c in parallel.cells]

    def test_empty_grid(self, linear_data):
        x, y = linear_data
        with pytest.raises(ParameterError):
            grid_search(x, y, x, y, c_grid=[], epsilon_grid=[0.1])

    def test_report_csv(self, tmp_path, linear_data):
        x, y = linear_data
        report = grid_search(x[:60], y[:60], x[60:], y[60:], c_grid=[1.0], epsilon_grid=[0.1])
        path = tmp_path / "grid.csv"
        report.to_csv(path)
        assert path.read_text().splitlines()[0] == "C,epsilon,dev_ccc,seconds"


class TestPersistence:
    """Test SVR model files"""

    def test_save_and_load_predict_identically(self, tmp_path, linear_data):
        x, y = linear_data
        model = fit_svr(x, y, C=0.5, epsilon=0.02)
        path = tmp_path / "valence.svrm"
        save_svr(path, model)
        loaded = load_svr(path)
        np.testing.assert_array_equal(predict_svr(loaded, x), predict_svr(model, x))
        assert (loaded.C, loaded.epsilon, loaded.kernel) == (0.5, 0.02, "linear")

    def test_network_checkpoint_is_not_a_model(self, tmp_path):
        from affectcae.models import build_cae
        from affectcae.nn import save_checkpoint

        spec, weights = build_cae(encoder_size=3, conv_channels=(2, 2, 2), input_size=8)
        path = tmp_path / "model.afpl"
        save_checkpoint(path, spec, weights)
        with pytest.raises(CheckpointError):
            load_svr(path)
