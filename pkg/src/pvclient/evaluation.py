"""Original-scale metrics, baselines, experiment grids and plot-data export."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import (
    PV_CHANNEL,
    STEPS_PER_DAY,
    SeriesFrame,
    Standardizer,
    WindowSample,
    fit_standardizer,
    make_windows,
    split_bounds,
    stack_windows,
)
from .model import AttentionKind, ModelConfig, OutputMode, PVClient, VariantFlags
from .training import TrainConfig, TrainingLog, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


def _pair(G, P) -> tuple[np.ndarray, np.ndarray]:
    G = np.asarray(G, dtype=np.float64).reshape(-1)
    P = np.asarray(P, dtype=np.float64).reshape(-1)
    if G.shape != P.shape:
        raise ValueError(f"length mismatch: {G.size} actual values vs {P.size} predictions")
    if G.size == 0:
        raise ValueError("metrics need at least one point")
    return G, P


def accuracy(G, P, cap: float) -> float:
    """1 - sqrt(sum (G - P)^2) / (cap * sqrt(n)), i.e. one minus RMSE over capacity."""
    G, P = _pair(G, P)
    if not cap > 0:
        raise ValueError(f"capacity must be positive, got {cap}")
    return 1.0 - math.sqrt(float(np.sum((G - P) ** 2))) / (cap * math.sqrt(G.size))


def mse_original(G, P) -> float:
    G, P = _pair(G, P)
    return float(np.mean((G - P) ** 2))


@dataclass(frozen=True)
class MetricReport:
    mse: float
    acc: float
    n: int
    cap: float

    @classmethod
    def from_series(cls, G, P, cap: float) -> MetricReport:
        G, P = _pair(G, P)
        return cls(mse_original(G, P), accuracy(G, P, cap), int(G.size), float(cap))


# ---------------------------------------------------------------------------
# baselines


def persistence_forecast(window: WindowSample, horizon: int, period: int = STEPS_PER_DAY,
                         target: int = PV_CHANNEL) -> np.ndarray:
    """Forecast step ``k`` with the value one ``period`` earlier; fall back to the last observation."""
    history = window.H[:, target]
    L = len(history)
    out = np.empty(horizon)
    for k in range(horizon):
        lagged = L + k - period  # index into history of step t+1+k-period
        out[k] = history[lagged] if 0 <= lagged < L else history[-1]
    return out


class LinearRegressionBaseline:
    """Ridge least squares from flattened ``L x C`` inputs to the ``T`` targets (closed form)."""

    def __init__(self, ridge: float = 1e-6):
        if not ridge > 0:
            raise ValueError(f"ridge must be positive, got {ridge}")
        self.ridge = ridge
        self.coef: np.ndarray | None = None
        self.intercept: np.ndarray | None = None

    def fit(self, H: np.ndarray, G: np.ndarray) -> LinearRegressionBaseline:
        X = np.asarray(H, dtype=np.float64).reshape(len(H), -1)
        Y = np.asarray(G, dtype=np.float64).reshape(len(G), -1)
        x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
        Xc, Yc = X - x_mean, Y - y_mean
        gram = Xc.T @ Xc + self.ridge * np.eye(X.shape[1])
        self.coef = np.linalg.solve(gram, Xc.T @ Yc)
        self.intercept = y_mean - x_mean @ self.coef
        return self

    def predict(self, H: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("LinearRegressionBaseline.predict called before fit")
        X = np.asarray(H, dtype=np.float64).reshape(len(H), -1)
        return X @ self.coef + self.intercept


# ---------------------------------------------------------------------------
# datasets and evaluation


@dataclass
class PreparedData:
    frame: SeriesFrame
    standardizer: Standardizer
    bounds: dict[str, tuple[int, int]]
    train_windows: list[WindowSample]
    test_windows: list[WindowSample]

    def standardized(self, windows: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
        H, G = stack_windows(list(windows))
        return self.standardizer.apply(H), self.standardizer.apply_channel(G, PV_CHANNEL)

    def train_arrays(self):
        return self.standardized(self.train_windows)

    def test_arrays(self):
        return self.standardized(self.test_windows)


def prepare_data(frame: SeriesFrame, input_len: int, horizon: int, standardizer: Standardizer | None = None,
                 fractions=(0.8, 0.1, 0.1), eval_split: str = "test") -> PreparedData:
    """Contiguous split, train-only standardization, stride-1 train windows and day-strided eval windows."""
    bounds = split_bounds(len(frame), fractions)
    lo, hi = bounds["train"]
    if standardizer is None:
        standardizer = fit_standardizer(frame.values[lo:hi])
    train_windows = make_windows(frame.values[lo:hi], input_len, horizon, stride=1)
    test_windows = make_windows(frame.values, input_len, horizon, stride=STEPS_PER_DAY,
                                target_range=bounds[eval_split])
    return PreparedData(frame, standardizer, bounds, train_windows, test_windows)


@dataclass
class ForecastReport:
    timestamps: list[datetime]
    actual: np.ndarray
    forecast: np.ndarray
    trend: np.ndarray
    detail: np.ndarray
    metrics: MetricReport


def evaluate_series(actual: np.ndarray, forecast: np.ndarray, cap: float,
                    timestamps: list[datetime] | None = None, trend=None, detail=None) -> ForecastReport:
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    forecast = np.asarray(forecast, dtype=np.float64).reshape(-1)
    trend = np.zeros_like(forecast) if trend is None else np.asarray(trend).reshape(-1)
    detail = forecast - trend if detail is None else np.asarray(detail).reshape(-1)
    return ForecastReport(list(timestamps or []), actual, forecast, trend, detail,
                          MetricReport.from_series(actual, forecast, cap))


def _target_stamps(frame: SeriesFrame, windows: Sequence[WindowSample]) -> list[datetime]:
    T = len(windows[0].G)
    return [frame.timestamps[w.target_start + k] for w in windows for k in range(T)]


def evaluate_model(model: PVClient, data: PreparedData) -> ForecastReport:
    H, _ = data.test_arrays()
    actual = np.stack([w.G for w in data.test_windows])
    with ad.no_grad():
        pred = model.forward(H)
    trend, detail = model.decompose(H, pred)
    std = data.standardizer
    forecast = std.invert_channel(pred.final.data, PV_CHANNEL)
    trend = std.invert_channel(trend, PV_CHANNEL)
    detail = detail * std.std[PV_CHANNEL]
    return evaluate_series(actual, forecast, data.frame.capacity, _target_stamps(data.frame, data.test_windows),
                           trend, detail)


def evaluate_predictor(predict: Callable[[WindowSample], np.ndarray], data: PreparedData) -> ForecastReport:
    """Score any per-window predictor that returns original-scale PV forecasts."""
    actual = np.stack([w.G for w in data.test_windows])
    forecast = np.stack([np.asarray(predict(w), dtype=np.float64) for w in data.test_windows])
    return evaluate_series(actual, forecast, data.frame.capacity, _target_stamps(data.frame, data.test_windows))


def evaluate_persistence(data: PreparedData) -> ForecastReport:
    T = len(data.test_windows[0].G)
    return evaluate_predictor(lambda w: persistence_forecast(w, T), data)


def evaluate_linear_regression(data: PreparedData, ridge: float = 1e-6) -> ForecastReport:
    H_tr, G_tr = data.train_arrays()
    lr = LinearRegressionBaseline(ridge).fit(H_tr, G_tr)
    H_te, _ = data.test_arrays()
    actual = np.stack([w.G for w in data.test_windows])
    forecast = data.standardizer.invert_channel(lr.predict(H_te), PV_CHANNEL)
    return evaluate_series(actual, forecast, data.frame.capacity, _target_stamps(data.frame, data.test_windows))


def fit_and_evaluate(data: PreparedData, cfg: ModelConfig, flags: VariantFlags, train_cfg: TrainConfig,
                     ) -> tuple[PVClient, TrainingLog, ForecastReport]:
    model = PVClient(cfg, flags, seed=train_cfg.seed)
    H, G = data.train_arrays()
    log = train(model, H, G, train_cfg)
    return model, log, evaluate_model(model, data)


# ---------------------------------------------------------------------------
# experiment grids

GRID_KINDS = ("ablation", "attention", "history", "output-mode")
HISTORY_LENGTHS = (96, 192, 384)


@dataclass
class GridRow:
    label: str
    setting: dict
    report: MetricReport


@dataclass
class ExperimentGrid:
    kind: str
    seed: int
    rows: list[GridRow] = field(default_factory=list)

    def labels(self) -> list[str]:
        return [r.label for r in self.rows]

    def row(self, label: str) -> GridRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "mse", "acc", "n"])
        for r in self.rows:
            writer.writerow([r.label, repr(r.report.mse), repr(r.report.acc), r.report.n])
        return buf.getvalue()

    def summary(self) -> str:
        """Structured-text summary with metrics rounded to 3 decimals."""
        payload = {
            "grid": self.kind,
            "seed": self.seed,
            "rows": [
                {"label": r.label, "setting": r.setting, "mse": round(r.report.mse, 3),
                 "acc": round(r.report.acc, 3), "n": r.report.n}
                for r in self.rows
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"grid_{self.kind}.csv"
        csv_path.write_text(self.to_csv())
        json_path = directory / f"grid_{self.kind}.json"
        json_path.write_text(self.summary() + "\n")
        return csv_path, json_path


def grid_cells(kind: str, base_cfg: ModelConfig, base_flags: VariantFlags) -> list[tuple[str, dict, ModelConfig, VariantFlags]]:
    """Enumerate (label, setting, config, flags) for one experiment grid."""
    if kind == "ablation":
        cells = [
            ("PV-Client", {}, base_flags),
            ("-Linear", {"use_linear": False}, replace(base_flags, use_linear=False)),
            ("-RevIN", {"use_revin": False}, replace(base_flags, use_revin=False)),
            ("+Embed", {"add_embedding": True}, replace(base_flags, add_embedding=True)),
        ]
        return [(label, s, base_cfg, f) for label, s, f in cells]
    if kind == "attention":
        names = {AttentionKind.ATTENTION: "Attention", AttentionKind.LINEAR: "Linear",
                 AttentionKind.MLP: "MLP", AttentionKind.NONE: "No Attention"}
        return [(name, {"attention_kind": k.value}, base_cfg, replace(base_flags, attention_kind=k))
                for k, name in names.items()]
    if kind == "history":
        return [(str(L), {"input_len": L}, replace(base_cfg, input_len=L), base_flags) for L in HISTORY_LENGTHS]
    if kind == "output-mode":
        names = {OutputMode.PV_DIM: "PV dim", OutputMode.RADIATION_DIM: "Radiation dim",
                 OutputMode.SUM_FIXED: "Sum (fixed weights)", OutputMode.SUM_LEARNABLE: "Sum (updatable weights)"}
        return [(name, {"output_mode": m.value}, base_cfg, replace(base_flags, output_mode=m))
                for m, name in names.items()]
    raise ValueError(f"unknown grid kind {kind!r}; expected one of {GRID_KINDS}")


def run_grid(kind: str, frame: SeriesFrame, base_cfg: ModelConfig | None = None,
             base_flags: VariantFlags | None = None, train_cfg: TrainConfig | None = None,
             progress: Callable[[str, MetricReport], None] | None = None) -> ExperimentGrid:
    """Train and score every cell of one grid from the same seed, data split and test windows."""
    base_cfg = base_cfg or ModelConfig()
    base_flags = base_flags or VariantFlags()
    train_cfg = train_cfg or TrainConfig()
    cells = grid_cells(kind, base_cfg, base_flags)
    longest = max(cfg.input_len for _, _, cfg, _ in cells)
    bounds = split_bounds(len(frame))
    lo, hi = bounds["test"]
    if lo < longest or hi - lo < base_cfg.horizon or bounds["train"][1] < longest + base_cfg.horizon:
        raise ValueError(
            f"{len(frame)} rows are too few for grid {kind!r}: need input_len={longest} plus horizon={base_cfg.horizon} "
            "in the training split and before the test split"
        )
    standardizer = fit_standardizer(frame.values[slice(*bounds["train"])])
    grid = ExperimentGrid(kind, train_cfg.seed)
    prepared: dict[int, PreparedData] = {}
    for label, setting, cfg, flags in cells:
        if cfg.input_len not in prepared:
            prepared[cfg.input_len] = prepare_data(frame, cfg.input_len, cfg.horizon, standardizer)
        _, _, report = fit_and_evaluate(prepared[cfg.input_len], cfg, flags, train_cfg)
        grid.rows.append(GridRow(label, setting, report.metrics))
        logger.info("grid %s cell %s: mse=%.3f acc=%.3f", kind, label, report.metrics.mse, report.metrics.acc)
        if progress is not None:
            progress(label, report.metrics)
    return grid


def export_plot_data(report: ForecastReport, path: str | Path) -> None:
    """Write ``timestamp,actual,forecast,trend_component,detail_component`` rows at full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "actual", "forecast", "trend_component", "detail_component"])
        stamps = report.timestamps or [None] * len(report.actual)
        for ts, a, f, t, d in zip(stamps, report.actual, report.forecast, report.trend, report.detail):
            writer.writerow([ts.isoformat() if ts is not None else "", repr(float(a)), repr(float(f)),
                             repr(float(t)), repr(float(d))])
