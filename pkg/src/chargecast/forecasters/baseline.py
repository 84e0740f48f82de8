"""Seasonal naive baseline: repeat the value one season back."""
from __future__ import annotations

import numpy as np

DEFAULT_SEASON_BINS = 2  # one day at 12 h bins


def seasonal_naive(values: np.ndarray, season: int = DEFAULT_SEASON_BINS) -> np.ndarray:
    """forecast[k] = values[k - season]; the first ``season`` bins are NaN."""
    values = np.asarray(values, dtype=float)
    if season < 1:
        raise ValueError(f"season must be at least 1 bin, got {season}")
    if len(values) <= season:
        raise ValueError(f"series of {len(values)} bins has no bin {season} to forecast")
    out = np.full(len(values), np.nan)
    out[season:] = values[:-season]
    return out
