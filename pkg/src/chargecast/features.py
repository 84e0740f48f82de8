"""Leakage-free feature engineering on demand series.

Every column at row ``k`` is computed from bins ``<= k`` only; the regression
target is the (normalized) demand one bin ahead. Power-valued features are
scaled by the station's nominal power, charging duration by the 48 h cleaning
cap, and the unbounded counters (downtime, sessions) by their training-set
maxima so the test blocks leak nothing backwards.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from datetime import datetime
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .ingest import DemandSeries, TemporalSplit

LOG_DELTA_EPS = 1e-9
CHARGE_HOURS_CAP = 48.0
DEMAND_LAGS = (0, 1, 5, 48)
ROLLING_LAGS = (0, 24, 48)
DEFAULT_ROLLING_WINDOW = 5  # midpoint of the supported 4-6 bin range
MAX_LAG = max(DEMAND_LAGS)

FEATURE_NAMES: tuple[str, ...] = (
    "hour_sin",
    "hour_cos",
    "day_sin",
    "day_cos",
    "week_sin",
    "week_cos",
    "activity_score",
    "downtime",
    "sessions",
    "avg_charge_hours",
    "demand_lag_0",
    "demand_lag_1",
    "demand_lag_5",
    "demand_lag_48",
    "roll_std_lag_0",
    "roll_std_lag_24",
    "roll_std_lag_48",
    "ema_lag_0",
    "ema_lag_24",
    "ema_lag_48",
    "log_delta",
    "linear_extrap",
    "nominal_power",
)

# Exogenous set used by the statistical baseline: calendar encodings plus the
# activity/usage descriptors, no lag or window columns.
ARX_EXOG_NAMES: tuple[str, ...] = (
    "hour_sin",
    "hour_cos",
    "day_sin",
    "day_cos",
    "week_sin",
    "week_cos",
    "activity_score",
    "sessions",
    "avg_charge_hours",
)

# Boosted trees see everything except the activity score.
GBT_FEATURE_NAMES: tuple[str, ...] = tuple(n for n in FEATURE_NAMES if n != "activity_score")

# Recurrent models consume per-step inputs; explicit lag and window columns are
# redundant with the sequence itself, and nominal power joins at the head.
RNN_STEP_FEATURE_NAMES: tuple[str, ...] = (
    "hour_sin",
    "hour_cos",
    "day_sin",
    "day_cos",
    "week_sin",
    "week_cos",
    "activity_score",
    "downtime",
    "sessions",
    "avg_charge_hours",
    "demand_lag_0",
    "log_delta",
)


def activity_score(downtime):
    """exp(-downtime), where downtime counts bins since the last non-zero demand."""
    return np.exp(-np.asarray(downtime, dtype=float)) if np.ndim(downtime) else math.exp(-downtime)


def log_delta(p_k: float, p_km1: float, eps: float = LOG_DELTA_EPS) -> float:
    """Log difference of consecutive demand values, guarded against zeros."""
    return math.log(p_k + eps) - math.log(p_km1 + eps)


def cyclical_encode(ts: datetime) -> tuple[float, float, float, float, float, float]:
    """Sin/cos pairs for hour of day, day of week, and ISO week of year (mod 52)."""
    hour = ts.hour + ts.minute / 60.0 + ts.second / 3600.0
    weekday = ts.weekday()
    week = ts.isocalendar()[1] % 52
    hour_phase = 2.0 * math.pi * hour / 24.0
    day_phase = 2.0 * math.pi * weekday / 7.0
    week_phase = 2.0 * math.pi * week / 52.0
    return (
        math.sin(hour_phase),
        math.cos(hour_phase),
        math.sin(day_phase),
        math.cos(day_phase),
        math.sin(week_phase),
        math.cos(week_phase),
    )


def compute_downtime(values: np.ndarray) -> np.ndarray:
    """Bins since last non-zero demand, scanning forward from the series start."""
    downtime = np.zeros(len(values), dtype=np.int64)
    run = 0
    for k, v in enumerate(values):
        run = 0 if v > 0 else run + 1
        downtime[k] = run
    return downtime


def rolling_std(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing sample standard deviation; partial windows use what exists, one point gives 0."""
    n = len(values)
    out = np.zeros(n)
    for k in range(n):
        chunk = values[max(0, k - window + 1) : k + 1]
        out[k] = float(np.std(chunk, ddof=1)) if len(chunk) > 1 else 0.0
    return out


def rolling_ema(values: np.ndarray, window: int) -> np.ndarray:
    """Recursive exponential moving average with smoothing 2 / (window + 1)."""
    alpha = 2.0 / (window + 1.0)
    out = np.empty(len(values))
    if len(values) == 0:
        return out
    out[0] = values[0]
    for k in range(1, len(values)):
        out[k] = alpha * values[k] + (1.0 - alpha) * out[k - 1]
    return out


def linear_extrapolation(window_values: Sequence[float]) -> float:
    """Least-squares line through the trailing window, evaluated one step ahead.

    Negative estimates clip to 0; fewer than two points give 0.
    """
    y = np.asarray(window_values, dtype=float)
    m = len(y)
    if m < 2:
        return 0.0
    x = np.arange(m, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    return max(0.0, float(slope * m + intercept))


@dataclass(frozen=True)
class NormalizationSpec:
    """Scaling constants; the unbounded maxima come from training rows only."""

    nominal_power_kw: Mapping[str, float]  # per-EVSE constant nominal maximum
    downtime_max: float
    sessions_max: float
    nominal_max_kw: float
    charge_hours_cap: float = CHARGE_HOURS_CAP

    def nominal_for(self, evse_id: str) -> float:
        return self.nominal_power_kw[evse_id]


def compute_normalization(
    series_map: Mapping[str, DemandSeries],
    split: TemporalSplit,
    nominal_power: Mapping[str, float] | None = None,
) -> NormalizationSpec:
    """Derive the normalization constants from the training block of every series.

    Per-EVSE nominal power comes from dataset metadata when provided, otherwise
    from the maximum demand observed on the training block.
    """
    nominal: dict[str, float] = {}
    downtime_max = 0.0
    sessions_max = 0.0
    for evse_id in sorted(series_map):
        series = series_map[evse_id]
        train = slice(0, split.train_end_index)
        if nominal_power is not None and nominal_power.get(evse_id):
            nominal[evse_id] = float(nominal_power[evse_id])
        else:
            nominal[evse_id] = float(np.max(series.values[train])) if split.train_end_index else 0.0
        downtime_max = max(downtime_max, float(np.max(compute_downtime(series.values)[train])))
        sessions_max = max(sessions_max, float(np.max(series.sessions_per_bin[train])))
    nominal_max = max(nominal.values()) if nominal else 0.0
    return NormalizationSpec(
        nominal_power_kw=nominal,
        downtime_max=downtime_max,
        sessions_max=sessions_max,
        nominal_max_kw=nominal_max,
    )


@dataclass
class FeatureFrame:
    """Aligned feature matrix and next-bin target for one EVSE.

    ``bin_index[i]`` gives row ``i``'s position on the common axis; the target
    of that row is the normalized demand at ``bin_index[i] + 1``.
    """

    evse_id: str
    bin_index: np.ndarray
    timestamps: list[datetime]
    matrix: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...]
    nominal_power_kw: float

    def __len__(self) -> int:
        return len(self.target)

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.feature_names.index(name)]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.feature_names.index(n) for n in names]
        return self.matrix[:, idx]

    def block_mask(self, split: TemporalSplit, block: str) -> np.ndarray:
        """Row membership by the bin being predicted (``bin_index + 1``)."""
        target_bin = self.bin_index + 1
        if block == "train":
            return target_bin < split.train_end_index
        if block == "valid":
            return (target_bin >= split.train_end_index) & (target_bin < split.valid_end_index)
        if block == "test":
            return target_bin >= split.valid_end_index
        raise ValueError(f"unknown block {block!r}")

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized) * self.nominal_power_kw

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(",".join(self.feature_names).encode())
        digest.update(self.bin_index.astype(np.int64).tobytes())
        digest.update(self.matrix.astype(np.float64).tobytes())
        digest.update(self.target.astype(np.float64).tobytes())
        return digest.hexdigest()


def build_feature_frame(
    series: DemandSeries,
    spec: NormalizationSpec,
    split: TemporalSplit,
    rolling_window: int = DEFAULT_ROLLING_WINDOW,
) -> FeatureFrame:
    """Assemble the full engineered feature matrix for one demand series.

    Rows without a complete 48-lag history are dropped, as is the final bin
    (it has no next-bin target). The extrapolation column is additionally
    capped at the station's nominal power so normalized power features stay in
    [0, 1] wherever the raw demand does.
    """
    nominal = spec.nominal_power_kw.get(series.evse_id, 0.0)
    if nominal <= 0:
        raise ConfigError(f"nominal power for {series.evse_id} must be positive, got {nominal}")
    if spec.downtime_max <= 0 or spec.sessions_max <= 0 or spec.nominal_max_kw <= 0:
        raise ConfigError("normalization maxima must be strictly positive")

    values = np.asarray(series.values, dtype=float)
    n = len(values)
    if n < MAX_LAG + 2:
        raise ValueError(f"series must span at least {MAX_LAG + 2} bins, got {n}")

    norm = values / nominal
    downtime = compute_downtime(values)
    act = np.exp(-downtime.astype(float))
    roll = rolling_std(values, rolling_window) / nominal
    ema = rolling_ema(values, rolling_window) / nominal

    rows = np.arange(MAX_LAG, n - 1)
    timestamps = [series.bin_start(int(k)) for k in rows]
    cyc = np.array([cyclical_encode(ts) for ts in timestamps])

    cols: dict[str, np.ndarray] = {
        "hour_sin": cyc[:, 0],
        "hour_cos": cyc[:, 1],
        "day_sin": cyc[:, 2],
        "day_cos": cyc[:, 3],
        "week_sin": cyc[:, 4],
        "week_cos": cyc[:, 5],
        "activity_score": act[rows],
        "downtime": downtime[rows] / spec.downtime_max,
        "sessions": series.sessions_per_bin[rows] / spec.sessions_max,
        "avg_charge_hours": series.avg_charge_hours_per_bin[rows] / spec.charge_hours_cap,
        "log_delta": np.log(values[rows] + LOG_DELTA_EPS) - np.log(values[rows - 1] + LOG_DELTA_EPS),
        "nominal_power": np.full(len(rows), nominal / spec.nominal_max_kw),
    }
    for lag in DEMAND_LAGS:
        cols[f"demand_lag_{lag}"] = norm[rows - lag]
    for lag in ROLLING_LAGS:
        cols[f"roll_std_lag_{lag}"] = roll[rows - lag]
        cols[f"ema_lag_{lag}"] = ema[rows - lag]
    extrap = np.array(
        [linear_extrapolation(values[k - rolling_window + 1 : k + 1]) for k in rows]
    )
    cols["linear_extrap"] = np.minimum(extrap, nominal) / nominal

    matrix = np.column_stack([cols[name] for name in FEATURE_NAMES])
    return FeatureFrame(
        evse_id=series.evse_id,
        bin_index=rows,
        timestamps=timestamps,
        matrix=matrix,
        target=norm[rows + 1],
        feature_names=FEATURE_NAMES,
        nominal_power_kw=nominal,
    )


def exogenous_matrix(series: DemandSeries, spec: NormalizationSpec, names: Sequence[str] = ARX_EXOG_NAMES) -> np.ndarray:
    """Exogenous columns over every bin of the series (no lag history needed).

    Used by the statistical baseline, which builds its own lag design and so
    cannot share the 48-lag row filtering of the full feature frame.
    """
    if spec.downtime_max <= 0 or spec.sessions_max <= 0:
        raise ConfigError("normalization maxima must be strictly positive")
    values = np.asarray(series.values, dtype=float)
    downtime = compute_downtime(values)
    cyc = np.array([cyclical_encode(series.bin_start(k)) for k in range(len(values))])
    cols = {
        "hour_sin": cyc[:, 0],
        "hour_cos": cyc[:, 1],
        "day_sin": cyc[:, 2],
        "day_cos": cyc[:, 3],
        "week_sin": cyc[:, 4],
        "week_cos": cyc[:, 5],
        "activity_score": np.exp(-downtime.astype(float)),
        "downtime": downtime / spec.downtime_max,
        "sessions": series.sessions_per_bin / spec.sessions_max,
        "avg_charge_hours": series.avg_charge_hours_per_bin / spec.charge_hours_cap,
    }
    return np.column_stack([cols[name] for name in names])


def write_frame_csv(frame: FeatureFrame, stream) -> None:
    """Columnar export with the frozen column order (bin, timestamp, features, target)."""
    header = ["bin_index", "bin_start", *frame.feature_names, "target"]
    stream.write(",".join(header) + "\n")
    for i in range(len(frame)):
        cells = [
            str(int(frame.bin_index[i])),
            frame.timestamps[i].strftime("%Y-%m-%dT%H:%M:%S+00:00"),
            *[repr(float(v)) for v in frame.matrix[i]],
            repr(float(frame.target[i])),
        ]
        stream.write(",".join(cells) + "\n")
