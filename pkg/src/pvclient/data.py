"""Station series I/O, standardization, window construction and a synthetic PV station."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHANNELS = ("pv_power", "radiation", "temperature", "humidity", "wind_speed", "surface_pressure")
HEADER = ("timestamp",) + CHANNELS
PV_CHANNEL = 0
RADIATION_CHANNEL = 1
STEPS_PER_DAY = 96
INTERVAL = timedelta(minutes=15)


class DataError(ValueError):
    """Invalid station data (schema, gaps, parse failures, invariant violations)."""


class SchemaError(DataError):
    pass


class GapError(DataError):
    pass


class ParseError(DataError):
    pass


@dataclass(frozen=True)
class SeriesFrame:
    timestamps: tuple[datetime, ...]
    values: np.ndarray  # (N, C)
    capacity: float
    channels: tuple[str, ...] = CHANNELS
    interval: timedelta = INTERVAL

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        validate_frame(self)

    def __len__(self) -> int:
        return len(self.timestamps)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.channels.index(name)]

    def slice(self, start: int, stop: int) -> SeriesFrame:
        return SeriesFrame(self.timestamps[start:stop], self.values[start:stop], self.capacity, self.channels, self.interval)


def validate_frame(frame: SeriesFrame) -> None:
    n, c = frame.values.shape if frame.values.ndim == 2 else (None, None)
    if n is None or c != len(frame.channels) or n != len(frame.timestamps):
        raise DataError(f"values shape {frame.values.shape} does not match {len(frame.timestamps)} timestamps x {len(frame.channels)} channels")
    if frame.capacity <= 0:
        raise DataError(f"capacity must be positive, got {frame.capacity}")
    for prev, cur in zip(frame.timestamps, frame.timestamps[1:]):
        if cur - prev != frame.interval:
            raise GapError(f"timestamp {cur.isoformat()} follows {prev.isoformat()}; expected a {frame.interval} step")
    if not np.all(np.isfinite(frame.values)):
        row = int(np.argwhere(~np.isfinite(frame.values))[0, 0])
        raise DataError(f"non-finite value at row {row}")
    pv = frame.values[:, frame.channels.index("pv_power")]
    bad = np.flatnonzero((pv < 0) | (pv > frame.capacity))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"pv_power={pv[i]} at {frame.timestamps[i].isoformat()} outside [0, capacity={frame.capacity}]")


def load_csv(path: str | Path, capacity: float) -> SeriesFrame:
    """Read a station CSV with the exact header ``timestamp,pv_power,...,surface_pressure``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [h for h in HEADER if h not in header]
        if missing:
            raise SchemaError(f"{path}: missing column {missing[0]!r}")
        if tuple(header) != HEADER:
            raise SchemaError(f"{path}: header must be {','.join(HEADER)}, got {','.join(header)}")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {len(HEADER)}")
            try:
                stamps.append(datetime.fromisoformat(row[0].strip()))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SeriesFrame(tuple(stamps), np.array(rows), float(capacity))


def write_csv(frame: SeriesFrame, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for ts, row in zip(frame.timestamps, frame.values):
            writer.writerow([ts.isoformat()] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowSample:
    H: np.ndarray  # (L, C), original scale
    G: np.ndarray  # (T,), original-scale pv_power
    start_index: int

    @property
    def target_start(self) -> int:
        return self.start_index + self.H.shape[0]


def window_count(n: int, input_len: int, horizon: int, stride: int = 1) -> int:
    if n < input_len + horizon:
        return 0
    return (n - input_len - horizon) // stride + 1


def build_window(values: np.ndarray, start: int, input_len: int, horizon: int, target: int = PV_CHANNEL) -> WindowSample:
    """One sample whose history ends at ``start + input_len - 1``.

    The target channel holds the last ``input_len`` observations; every other
    channel is read ``horizon`` steps ahead, so its final ``horizon`` rows are the
    weather for the forecast day.
    """
    L, T = input_len, horizon
    H = values[start + T:start + T + L].copy()
    H[:, target] = values[start:start + L, target]
    G = values[start + L:start + L + T, target].copy()
    return WindowSample(H, G, start)


def make_windows(frame: SeriesFrame | np.ndarray, input_len: int, horizon: int, stride: int = 1,
                 target_range: tuple[int, int] | None = None) -> list[WindowSample]:
    """Sliding windows at offsets ``0, stride, ...``.

    With ``target_range=(lo, hi)`` only windows whose forecast rows lie inside
    ``[lo, hi)`` are produced, starting from the first window whose forecast
    begins at ``lo``; history may reach back before ``lo``.
    """
    values = frame.values if isinstance(frame, SeriesFrame) else np.asarray(frame)
    n = len(values)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if target_range is None:
        if n < input_len + horizon:
            raise DataError(f"series of length {n} is shorter than input_len + horizon = {input_len + horizon}")
        starts = range(0, n - input_len - horizon + 1, stride)
    else:
        lo, hi = target_range
        first = max(lo - input_len, 0)
        last = hi - input_len - horizon
        if last < first or hi > n:
            raise DataError(
                f"target range [{lo}, {hi}) cannot hold one window with input_len={input_len}, horizon={horizon} in {n} rows"
            )
        starts = range(first, last + 1, stride)
    return [build_window(values, s, input_len, horizon) for s in starts]


def stack_windows(windows: list[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([w.H for w in windows]), np.stack([w.G for w in windows])


def split_bounds(n: int, fractions=(0.8, 0.1, 0.1), align: int = STEPS_PER_DAY) -> dict[str, tuple[int, int]]:
    """Contiguous train/val/test row ranges; cut points are rounded down to whole days."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    a = int(n * fractions[0]) // align * align
    b = int(n * (fractions[0] + fractions[1])) // align * align
    return {"train": (0, a), "val": (a, b), "test": (b, n)}


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    clamped: list[int] = field(default_factory=list)

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def _check(self):
        if not self.fitted:
            raise RuntimeError("Standardizer used before fit")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check()
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        self._check()
        return np.asarray(z) * self.std + self.mean

    def apply_channel(self, x: np.ndarray, channel: int) -> np.ndarray:
        self._check()
        return (np.asarray(x) - self.mean[channel]) / self.std[channel]

    def invert_channel(self, z: np.ndarray, channel: int) -> np.ndarray:
        self._check()
        return np.asarray(z) * self.std[channel] + self.mean[channel]

    def to_dict(self) -> dict:
        self._check()
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_standardizer(train: SeriesFrame | np.ndarray) -> Standardizer:
    values = train.values if isinstance(train, SeriesFrame) else np.asarray(train, dtype=np.float64)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    clamped = [int(c) for c in np.flatnonzero(std == 0.0)]
    for c in clamped:
        logger.warning("channel %d has zero variance on the training split; std clamped to 1", c)
    std = np.where(std == 0.0, 1.0, std)
    return Standardizer(mean, std, clamped)


# ---------------------------------------------------------------------------
# synthetic station


def _saturation(x: np.ndarray, kappa: float) -> np.ndarray:
    return (1.0 - np.exp(-kappa * x)) / (1.0 - math.exp(-kappa))


def synth_station(
    seed: int = 42,
    days: int = 60,
    capacity: float = 100.0,
    shift_profile: float = 0.4,
    weather_source: str = "forecast",
    start: datetime = datetime(2023, 3, 1),
) -> tuple[SeriesFrame, dict]:
    """Seeded 15-minute PV station with a seasonal distribution shift and forecast error.

    ``shift_profile`` is the relative growth of the daily irradiance amplitude from
    the first to the last day; both radiation and PV output scale with it.
    ``weather_source="forecast"`` writes forecast weather (day-level cloud guess
    plus noise) into the weather columns, ``"measured"`` writes the true drivers.
    """
    if days < 4:
        raise ValueError(f"days must be >= 4, got {days}")
    if weather_source not in ("forecast", "measured"):
        raise ValueError(f"weather_source must be 'forecast' or 'measured', got {weather_source!r}")
    rng = np.random.default_rng(seed)
    n = days * STEPS_PER_DAY
    step = np.arange(n)
    day = step // STEPS_PER_DAY
    hour = (step % STEPS_PER_DAY) / 4.0

    meta = {
        "seed": seed,
        "days": days,
        "capacity": capacity,
        "shift_profile": shift_profile,
        "weather_source": weather_source,
        "sunrise_hour": 6.0,
        "sunset_hour": 18.5,
        "peak_irradiance": 1000.0,
        "saturation_kappa": 2.2,
        "temp_coefficient": 0.006,
        "temp_reference": 25.0,
        "pv_noise": 0.02,
        "cloud_ar": 0.85,
        "cloud_fluct": 0.12,
        "forecast_cloud_error": 0.12,
        "forecast_radiation_noise": 0.03,
    }

    # Daily amplitude multiplier m(d): normalized so the final day equals 1.
    ramp = 1.0 + shift_profile * day / max(days - 1, 1)
    amplitude = ramp / (1.0 + shift_profile)
    meta["amplitude_first"] = float(amplitude[0])
    meta["amplitude_last"] = float(amplitude[-1])

    rise, sset = meta["sunrise_hour"], meta["sunset_hour"]
    daylight = (hour > rise) & (hour < sset)
    clear = np.where(daylight, np.sin(np.pi * (hour - rise) / (sset - rise)), 0.0)

    day_cloud = rng.beta(2.2, 1.2, size=days)  # 1 = clear
    fluct = np.zeros(n)
    shocks = rng.normal(0.0, meta["cloud_fluct"], size=n)
    for i in range(1, n):
        fluct[i] = meta["cloud_ar"] * fluct[i - 1] + shocks[i]
    cloud = np.clip(0.15 + 0.85 * day_cloud[day] + fluct, 0.05, 1.0)
    sky = clear * cloud  # fraction of peak irradiance actually received
    radiation = meta["peak_irradiance"] * amplitude * sky

    temp_base = 18.0 + 8.0 * amplitude + rng.normal(0.0, 1.5, size=days)[day]
    temperature = temp_base + 9.0 * sky + 3.0 * np.sin(np.pi * (hour - 9.0) / 12.0) + rng.normal(0.0, 0.4, size=n)
    humidity = np.clip(85.0 - 45.0 * day_cloud[day] - 15.0 * sky + rng.normal(0.0, 3.0, size=n), 5.0, 100.0)
    wind = np.abs(2.5 + 1.5 * rng.standard_normal(days)[day] + 0.8 * rng.standard_normal(n))
    pressure = 1013.0 + np.cumsum(rng.normal(0.0, 0.05, size=n)) - 4.0 * (1.0 - day_cloud[day])

    damp = 1.0 - meta["temp_coefficient"] * np.maximum(temperature - meta["temp_reference"], 0.0)
    response = _saturation(sky, meta["saturation_kappa"]) * damp
    pv = capacity * amplitude * response * (1.0 + meta["pv_noise"] * rng.standard_normal(n))
    pv = np.where(daylight, np.clip(pv, 0.0, capacity), 0.0)

    if weather_source == "forecast":
        guess = np.clip(0.15 + 0.85 * np.clip(day_cloud + rng.normal(0.0, meta["forecast_cloud_error"], size=days), 0.0, 1.0), 0.05, 1.0)
        rad_fc = meta["peak_irradiance"] * amplitude * clear * guess[day]
        rad_fc = np.maximum(rad_fc * (1.0 + meta["forecast_radiation_noise"] * rng.standard_normal(n)), 0.0)
        weather = np.column_stack([
            rad_fc,
            temperature + rng.normal(0.0, 1.0, size=n),
            np.clip(humidity + rng.normal(0.0, 5.0, size=n), 0.0, 100.0),
            np.abs(wind + rng.normal(0.0, 0.7, size=n)),
            pressure + rng.normal(0.0, 0.5, size=n),
        ])
    else:
        weather = np.column_stack([radiation, temperature, humidity, wind, pressure])

    values = np.column_stack([pv, weather])
    stamps = tuple(start + i * INTERVAL for i in range(n))
    return SeriesFrame(stamps, values, float(capacity)), meta
