"""Forecast evaluation metrics and cross-station quantile reporting.

Every metric returns NaN where its mathematical preconditions fail (constant
training series for MASE, zero total demand for WAPE, zero variance for R2);
the quantile report excludes NaNs instead of zero-filling them, which would
bias the summary toward optimism.
"""
from __future__ import annotations

import json
import math
from typing import Mapping, Sequence

import numpy as np

MASE_SEASON_BINS = 24  # 12 days at 12 h bins
METRIC_NAMES = ("mase", "smape", "maape", "wape", "rmse", "mae", "r2")
QUANTILE_LEVELS = (0.25, 0.5, 0.75)


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {y_true.shape} and {y_pred.shape}")
    if len(y_true) == 0:
        raise ValueError("metrics need at least one observation")
    return y_true, y_pred


def mae(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.mean(np.abs(y_true - y_pred)))


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def wape(y_true, y_pred) -> float:
    """Sum of absolute errors over sum of absolute actuals; NaN when demand is all zero."""
    y_true, y_pred = _pair(y_true, y_pred)
    denom = float(np.sum(np.abs(y_true)))
    if denom == 0.0:
        return math.nan
    return float(np.sum(np.abs(y_true - y_pred)) / denom)


def r2(y_true, y_pred) -> float:
    """Coefficient of determination; NaN for constant actuals (zero variance)."""
    y_true, y_pred = _pair(y_true, y_pred)
    ss_tot = float(np.sum((y_true - np.mean(y_true)) ** 2))
    if ss_tot == 0.0:
        return math.nan
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


def smape(y_true, y_pred) -> float:
    """Symmetric MAPE on the 0-200 scale; both-zero terms contribute 0."""
    y_true, y_pred = _pair(y_true, y_pred)
    denom = np.abs(y_true) + np.abs(y_pred)
    terms = np.zeros(len(y_true))
    nonzero = denom > 0
    # divide before scaling: the ratio can never round above 1, so terms stay
    # at or below 200 even when multiply-first would overshoot by an ulp
    terms[nonzero] = np.abs(y_true - y_pred)[nonzero] / denom[nonzero] * 200.0
    return float(np.mean(terms))


def maape(y_true, y_pred) -> float:
    """Arctangent absolute percentage error in radians, bounded by pi/2.

    Zero actual with a non-zero forecast saturates to pi/2; an exact zero-zero
    pair contributes 0.
    """
    y_true, y_pred = _pair(y_true, y_pred)
    terms = np.empty(len(y_true))
    zero_actual = y_true == 0
    terms[zero_actual] = np.where(y_pred[zero_actual] == 0, 0.0, math.pi / 2)
    ok = ~zero_actual
    terms[ok] = np.arctan(np.abs(y_true[ok] - y_pred[ok]) / np.abs(y_true[ok]))
    return float(np.mean(terms))


def mase(y_true, y_pred, train_series, season: int = MASE_SEASON_BINS) -> float:
    """MAE scaled by the in-sample seasonal-naive MAE of the training series.

    NaN when the training series repeats itself exactly with period ``season``
    (zero denominator); that station is excluded from quantile summaries.
    """
    y_true, y_pred = _pair(y_true, y_pred)
    train = np.asarray(train_series, dtype=float)
    if season < 1:
        raise ValueError(f"season must be at least 1, got {season}")
    if len(train) <= season:
        raise ValueError(f"training series of {len(train)} bins cannot support season {season}")
    denom = float(np.mean(np.abs(train[season:] - train[:-season])))
    if denom == 0.0:
        return math.nan
    return float(np.mean(np.abs(y_true - y_pred)) / denom)


def evaluate_forecast(y_true, y_pred, train_series, season: int = MASE_SEASON_BINS) -> dict:
    """All seven metrics for one station's test block."""
    return {
        "mase": mase(y_true, y_pred, train_series, season),
        "smape": smape(y_true, y_pred),
        "maape": maape(y_true, y_pred),
        "wape": wape(y_true, y_pred),
        "rmse": rmse(y_true, y_pred),
        "mae": mae(y_true, y_pred),
        "r2": r2(y_true, y_pred),
    }


def quantile_report(per_evse: Mapping[str, Mapping[str, float]],
                    levels: Sequence[float] = QUANTILE_LEVELS) -> dict:
    """Cross-station quantiles (linear interpolation) over the defined values.

    Metrics with no defined value anywhere are reported with a note instead of
    numbers. NaN entries count as undefined and never enter the quantiles.
    """
    if not per_evse:
        raise ValueError("no per-EVSE metrics to summarize")
    summary: dict = {}
    for name in METRIC_NAMES:
        values = np.array([per_evse[e].get(name, math.nan) for e in sorted(per_evse)])
        defined = values[~np.isnan(values)]
        entry: dict = {
            "n_defined": int(len(defined)),
            "n_undefined": int(len(values) - len(defined)),
        }
        if len(defined) == 0:
            entry["note"] = "undefined for every station"
        else:
            for level in levels:
                entry[f"q{int(round(level * 100))}"] = float(np.quantile(defined, level))
        summary[name] = entry
    return {
        "per_evse": {e: dict(per_evse[e]) for e in sorted(per_evse)},
        "quantiles": summary,
    }


def write_report_json(report: dict, stream) -> None:
    """Structured text export; NaN encodes as null for portability."""

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, float) and math.isnan(obj):
            return None
        return obj

    json.dump(clean(report), stream, indent=2, sort_keys=True)
    stream.write("\n")
