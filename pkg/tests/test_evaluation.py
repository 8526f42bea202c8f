import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvclient.autodiff import Tensor
from pvclient.data import WindowSample, synth_station
from pvclient.evaluation import (
    ExperimentGrid,
    GridRow,
    LinearRegressionBaseline,
    MetricReport,
    accuracy,
    evaluate_linear_regression,
    evaluate_model,
    evaluate_persistence,
    evaluate_predictor,
    export_plot_data,
    grid_cells,
    mse_original,
    persistence_forecast,
    prepare_data,
    run_grid,
)
from pvclient.model import ModelConfig, PVClient, VariantFlags
from pvclient.training import TrainConfig, mse_loss

SMALL = ModelConfig(input_len=96, horizon=96, num_blocks=1, d_model=8, heads=2, embed_dim=8)


@pytest.fixture(scope="module")
def small_data():
    frame, _ = synth_station(seed=42, days=20)
    return prepare_data(frame, SMALL.input_len, SMALL.horizon)


class TestAccuracy:
    def test_perfect(self):
        assert accuracy([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 100.0) == 1.0

    def test_hand_oracle(self):
        assert accuracy([10.0, 20.0, 30.0, 40.0], [20.0, 10.0, 40.0, 30.0], 100.0) == 0.9

    def test_error_equal_to_capacity(self):
        assert accuracy([0.0, 100.0], [100.0, 0.0], 100.0) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(0, 100)), arrays(np.float64, 8, elements=st.floats(0, 100)),
           st.floats(0.1, 10))
    def test_bounded_and_homogeneous(self, G, P, k):
        acc = accuracy(G, P, 100.0)
        assert acc <= 1.0
        assert accuracy(k * G, k * P, k * 100.0) == pytest.approx(acc, abs=1e-12)

    def test_lower_mse_means_higher_accuracy(self):
        G = np.linspace(0, 50, 20)
        rng = np.random.default_rng(0)
        a, b = G + rng.normal(0, 1, 20), G + rng.normal(0, 5, 20)
        assert (mse_original(G, a) < mse_original(G, b)) == (accuracy(G, a, 100) > accuracy(G, b, 100))

    @pytest.mark.parametrize("cap", [0.0, -1.0])
    def test_nonpositive_capacity(self, cap):
        with pytest.raises(ValueError):
            accuracy([1.0], [1.0], cap)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([1.0, 2.0], [1.0], 10.0)


class TestMseOriginal:
    def test_single_error(self):
        assert mse_original([0.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]) == 1.0

    def test_matches_loss_after_inverse_standardization(self):
        rng = np.random.default_rng(1)
        z_g, z_p = rng.normal(size=12), rng.normal(size=12)
        mean, std = 30.0, 12.0
        loss = mse_loss(Tensor(z_p), z_g).item()
        assert mse_original(z_g * std + mean, z_p * std + mean) == pytest.approx(loss * std**2, rel=1e-12)

    def test_report_fields(self):
        r = MetricReport.from_series([1.0, 2.0], [1.0, 4.0], 10.0)
        assert (r.mse, r.n, r.cap) == (2.0, 2, 10.0)


class TestPersistence:
    def test_periodic_series_is_exact(self):
        day = np.sin(np.linspace(0, np.pi, 96)) * 50
        series = np.tile(day, 4)
        H = np.zeros((192, 6))
        H[:, 0] = series[:192]
        w = WindowSample(H, series[192:288], 0)
        np.testing.assert_allclose(persistence_forecast(w, 96), w.G)

    def test_constant_series(self):
        w = WindowSample(np.full((192, 6), 7.0), np.zeros(96), 0)
        assert np.all(persistence_forecast(w, 96) == 7.0)

    def test_short_history_falls_back_to_last_value(self):
        H = np.zeros((48, 6))
        H[:, 0] = np.arange(48)
        out = persistence_forecast(WindowSample(H, np.zeros(96), 0), 96)
        assert out[0] == 47.0 and out[60] == 12.0


class TestLinearRegression:
    def test_realizable(self):
        rng = np.random.default_rng(0)
        # enough rows that the 1e-6 ridge bias (about ridge / n) stays below the tolerance
        X = rng.normal(size=(2000, 5, 2))
        W = rng.normal(size=(10, 3))
        Y = X.reshape(2000, -1) @ W + np.array([1.0, -2.0, 0.5])
        lr = LinearRegressionBaseline().fit(X, Y)
        assert np.abs(lr.predict(X) - Y).max() < 1e-8

    def test_large_ridge_predicts_mean(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(50, 4)), rng.normal(size=(50, 2))
        lr = LinearRegressionBaseline(ridge=1e12).fit(X, Y)
        np.testing.assert_allclose(lr.predict(X), np.broadcast_to(Y.mean(axis=0), Y.shape), atol=1e-9)

    def test_matches_gradient_descent(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(120, 6))
        Y = X @ rng.normal(size=(6, 2)) + rng.normal(0, 0.3, size=(120, 2)) + 3.0
        lr = LinearRegressionBaseline().fit(X, Y)
        # plain gradient descent on the same centred ridge objective
        xm, ym = X.mean(0), Y.mean(0)
        Xc, Yc = X - xm, Y - ym
        W = np.zeros((6, 2))
        step = 1.0 / np.linalg.eigvalsh(Xc.T @ Xc / len(X)).max()
        for _ in range(5000):
            W -= step * (Xc.T @ (Xc @ W - Yc) / len(X) + 1e-6 * W / len(X))
        gd_pred = Xc @ W + ym
        closed = mse_original(Y, lr.predict(X))
        assert mse_original(Y, gd_pred) == pytest.approx(closed, rel=1e-4)

    def test_zero_ridge_disallowed(self):
        with pytest.raises(ValueError):
            LinearRegressionBaseline(ridge=0.0)

    def test_predict_before_fit(self):
        with pytest.raises(RuntimeError):
            LinearRegressionBaseline().predict(np.zeros((1, 3)))


class TestEvaluationPipeline:
    def test_test_windows_day_aligned(self, small_data):
        lo, hi = small_data.bounds["test"]
        starts = [w.target_start for w in small_data.test_windows]
        assert starts[0] == lo and all(b - a == 96 for a, b in zip(starts, starts[1:]))
        assert starts[-1] + 96 <= hi

    def test_perfect_oracle_scores_one(self, small_data):
        report = evaluate_predictor(lambda w: w.G, small_data)
        assert report.metrics.acc == 1.0 and report.metrics.mse == 0.0
        assert report.metrics.n == 96 * len(small_data.test_windows)

    def test_baselines_run(self, small_data):
        for report in (evaluate_persistence(small_data), evaluate_linear_regression(small_data)):
            assert 0.0 < report.metrics.acc < 1.0

    def test_model_report_additive_and_exportable(self, small_data, tmp_path):
        report = evaluate_model(PVClient(SMALL, seed=1), small_data)
        np.testing.assert_allclose(report.trend + report.detail, report.forecast, atol=1e-9)
        path = tmp_path / "plot.csv"
        export_plot_data(report, path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["timestamp", "actual", "forecast", "trend_component", "detail_component"]
        assert len(rows) == report.metrics.n
        for row in rows:
            assert float(row["trend_component"]) + float(row["detail_component"]) == pytest.approx(
                float(row["forecast"]), abs=1e-9)
        np.testing.assert_array_equal([float(r["forecast"]) for r in rows], report.forecast)


class TestGrids:
    @pytest.mark.parametrize("kind,labels", [
        ("ablation", ["PV-Client", "-Linear", "-RevIN", "+Embed"]),
        ("attention", ["Attention", "Linear", "MLP", "No Attention"]),
        ("history", ["96", "192", "384"]),
        ("output-mode", ["PV dim", "Radiation dim", "Sum (fixed weights)", "Sum (updatable weights)"]),
    ])
    def test_enumeration(self, kind, labels):
        assert [c[0] for c in grid_cells(kind, ModelConfig(), VariantFlags())] == labels

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            grid_cells("decoder", ModelConfig(), VariantFlags())

    def test_history_needs_enough_rows(self):
        frame, _ = synth_station(seed=1, days=5)
        with pytest.raises(ValueError, match="too few"):
            run_grid("history", frame, SMALL, VariantFlags(), TrainConfig(epochs=0))

    def test_run_grid_shares_test_points(self):
        frame, _ = synth_station(seed=1, days=20)
        grid = run_grid("output-mode", frame, SMALL, VariantFlags(), TrainConfig(epochs=1, seed=3))
        assert grid.labels() == ["PV dim", "Radiation dim", "Sum (fixed weights)", "Sum (updatable weights)"]
        assert len({r.report.n for r in grid.rows}) == 1

    def test_csv_and_summary(self, tmp_path):
        grid = ExperimentGrid("ablation", 42, [GridRow("PV-Client", {}, MetricReport(1.23456789, 0.9123456, 96, 100.0))])
        csv_path, json_path = grid.write(tmp_path)
        assert csv_path.read_text() == "label,mse,acc,n\nPV-Client,1.23456789,0.9123456,96\n"
        summary = json.loads(json_path.read_text())
        assert summary["rows"][0]["mse"] == 1.235 and summary["seed"] == 42
