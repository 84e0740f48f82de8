"""Per-station autoregressive baseline with exogenous calendar/usage inputs.

Ordinary least squares on a fixed design: the previous ``n_lags`` demand
values, the exogenous row of the information bin, optional seasonal dummies,
and an intercept. Fitting is per EVSE and never federated; it exists as the
statistical yardstick the learned models have to beat.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..features import ARX_EXOG_NAMES
from ..ingest import TemporalSplit


@dataclass(frozen=True)
class ArxConfig:
    n_lags: int = 48
    exog_names: tuple = ARX_EXOG_NAMES   # which engineered columns enter the design
    seasonal_dummies: bool = False       # one-hot of bin phase within the season
    season_bins: int = 2                 # bins per season (a day at 12 h bins)
    ridge: float = 1e-8                  # fallback regularization for rank-deficient designs

    def __post_init__(self):
        if self.n_lags < 1:
            raise ValueError(f"n_lags must be at least 1, got {self.n_lags}")
        if self.season_bins < 1:
            raise ValueError(f"season_bins must be at least 1, got {self.season_bins}")
        if self.ridge <= 0:
            raise ValueError(f"ridge must be positive, got {self.ridge}")


@dataclass
class ArxModel:
    evse_id: str
    config: ArxConfig
    coef: np.ndarray  # [lag 1 .. lag p, exog..., dummies..., intercept]
    n_exog: int
    ridge_fallback: bool = False

    def predict_all(self, values: np.ndarray, exog: np.ndarray) -> np.ndarray:
        """One-step-ahead predictions for every bin with enough history.

        ``out[k]`` predicts bin ``k`` from demand lags ``values[k-1 .. k-p]``
        and the exogenous row at ``k - 1`` (nothing from bin ``k`` itself).
        Bins without full history are NaN; predictions clip at zero.
        """
        if exog.shape[1] != self.n_exog:
            raise ValueError(f"expected {self.n_exog} exogenous columns, got {exog.shape[1]}")
        X, _, targets = _design(values, exog, self.config)
        out = np.full(len(values), np.nan)
        out[targets] = np.clip(X @ self.coef, 0.0, None)
        return out

    def to_payload(self) -> dict:
        return {
            "evse_id": self.evse_id,
            "n_lags": self.config.n_lags,
            "exog_names": list(self.config.exog_names),
            "seasonal_dummies": self.config.seasonal_dummies,
            "season_bins": self.config.season_bins,
            "ridge": self.config.ridge,
            "coef": self.coef,
            "n_exog": self.n_exog,
            "ridge_fallback": self.ridge_fallback,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ArxModel":
        config = ArxConfig(
            n_lags=int(payload["n_lags"]),
            exog_names=tuple(payload["exog_names"]),
            seasonal_dummies=bool(payload["seasonal_dummies"]),
            season_bins=int(payload["season_bins"]),
            ridge=float(payload["ridge"]),
        )
        return cls(
            evse_id=payload["evse_id"],
            config=config,
            coef=np.asarray(payload["coef"]),
            n_exog=int(payload["n_exog"]),
            ridge_fallback=bool(payload["ridge_fallback"]),
        )


def _design(values: np.ndarray, exog: np.ndarray, config: ArxConfig):
    """Design matrix over all predictable bins: rows indexed by target bin k >= p."""
    values = np.asarray(values, dtype=float)
    p = config.n_lags
    n = len(values)
    if exog.shape[0] != n:
        raise ValueError(f"exog rows {exog.shape[0]} must match series length {n}")
    targets = np.arange(p, n)
    blocks = [np.column_stack([values[targets - lag] for lag in range(1, p + 1)])]
    if exog.shape[1]:
        blocks.append(exog[targets - 1])
    if config.seasonal_dummies and config.season_bins > 1:
        phase = targets % config.season_bins
        blocks.append(np.column_stack(
            [(phase == level).astype(float) for level in range(1, config.season_bins)]
        ))
    blocks.append(np.ones((len(targets), 1)))
    return np.concatenate(blocks, axis=1), values[targets], targets


def fit_arx(
    values: np.ndarray,
    exog: np.ndarray,
    split: TemporalSplit,
    config: ArxConfig = ArxConfig(),
    evse_id: str = "",
) -> ArxModel:
    """Least-squares fit on the training block; ridge fallback when rank-deficient."""
    values = np.asarray(values, dtype=float)
    if config.n_lags > len(values) // 4:
        raise ValueError(
            f"autoregressive order {config.n_lags} exceeds a quarter of the "
            f"series length {len(values)}"
        )
    if len(values) <= config.n_lags + exog.shape[1] + 1:
        raise ValueError(
            f"series of {len(values)} bins is too short for order {config.n_lags} "
            f"with {exog.shape[1]} exogenous columns"
        )
    X, y, targets = _design(values, exog, config)
    train = targets < split.train_end_index
    X_train, y_train = X[train], y[train]
    coef, _, rank, _ = np.linalg.lstsq(X_train, y_train, rcond=None)
    fallback = bool(rank < X.shape[1])
    if fallback:
        gram = X_train.T @ X_train + config.ridge * np.eye(X.shape[1])
        coef = np.linalg.solve(gram, X_train.T @ y_train)
        warnings.warn(f"ARX for {evse_id or 'series'}: rank-deficient design "
                      f"(rank {rank} < {X.shape[1]}), ridge fallback applied")
    return ArxModel(evse_id=evse_id, config=config, coef=coef, n_exog=exog.shape[1],
                    ridge_fallback=fallback)
