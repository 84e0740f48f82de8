"""Forecasting models: quantile loss, boosted trees, recurrent nets, baselines."""

from .arx import ArxConfig, ArxModel, fit_arx
from .baseline import seasonal_naive
from .gbt import BoostedTreesModel, GbtConfig, Tree, fit_gbt, fit_tree
from .pinball import PINBALL_ALPHA, boosting_residuals, pinball_grad, pinball_loss
from .rnn import (
    RnnConfig,
    RnnModel,
    RnnTrainer,
    SequenceData,
    build_sequence_dataset,
    fit_rnn,
    train_early_stopping,
)
from .store import load_model, save_model

__all__ = [
    "ArxConfig",
    "ArxModel",
    "fit_arx",
    "seasonal_naive",
    "BoostedTreesModel",
    "GbtConfig",
    "Tree",
    "fit_gbt",
    "fit_tree",
    "PINBALL_ALPHA",
    "boosting_residuals",
    "pinball_grad",
    "pinball_loss",
    "RnnConfig",
    "RnnModel",
    "RnnTrainer",
    "SequenceData",
    "build_sequence_dataset",
    "fit_rnn",
    "train_early_stopping",
    "load_model",
    "save_model",
]
