"""End-to-end experiment runs over a charging fleet.

Two entry points share one data pipeline (ingest, cleaning, binning,
normalization, feature frames):

* :func:`run_centralized` trains each roster family once on the pooled
  training block (the statistical baseline stays per-EVSE, it has no pooled
  form) and scores the held-out test block per station;
* :func:`run_federated` clusters stations into geographic hubs and trains
  the recurrent nets by FedAvg/FedProx rounds and the boosted trees by
  ensemble concatenation plus a federated combine layer.

Every artifact is a deterministic function of (config, seed): reruns write
byte-identical files, which the run manifest pins with content hashes.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from datetime import timedelta
from pathlib import Path
from typing import Mapping

import numpy as np

from .energy import EnergyLedger, OpCountMeter, phase_comparison, write_ledger_csv
from .errors import ConfigError
from .features import (
    GBT_FEATURE_NAMES,
    RNN_STEP_FEATURE_NAMES,
    NormalizationSpec,
    build_feature_frame,
    compute_normalization,
    exogenous_matrix,
)
from .federation import (
    HEAVY_LOCAL_EPOCHS,
    LIGHT_LOCAL_EPOCHS,
    FederationPlan,
    FedXgbPlan,
    HubAssignment,
    cluster_hubs,
    fedxgb_aggregate_ensembles,
    fedxgb_train_weights,
    run_federation,
    write_round_log,
)
from .forecasters import (
    ArxConfig,
    BoostedTreesModel,
    GbtConfig,
    RnnConfig,
    RnnModel,
    RnnTrainer,
    fit_arx,
    fit_gbt,
    fit_rnn,
    save_model,
    seasonal_naive,
)
from .forecasters.pinball import pinball_loss
from .forecasters.baseline import DEFAULT_SEASON_BINS
from .forecasters.rnn import build_sequence_dataset
from .ingest import (
    SyntheticProfile,
    TemporalSplit,
    clean_transactions,
    evse_metadata,
    generate_synthetic,
    parse_transactions,
    resample_demand,
    split_temporal,
)
from .metrics import evaluate_forecast, quantile_report, write_report_json

MODEL_FAMILIES = ("seasonal-naive", "arx", "gbt", "rnn")

# embedding/head widths are fixed fleet-model choices, not tuned per run
LOC_EMB_DIM = 15
MODEL_EMB_DIM = 3
DENSE_SIZE = 12
DROPOUT = 0.13


class StageError(RuntimeError):
    """Pipeline failure annotated with the stage it came from."""


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage {name}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; two runs with equal configs are bit-identical."""

    # data source: a transactions file, or the synthetic generator when None
    source_csv: str | None = None
    synthetic_evse: int = 8
    synthetic_days: int = 120
    synthetic_profile: SyntheticProfile = SyntheticProfile()
    bin_hours: float = 12.0
    split_ratios: tuple = (0.7, 0.2, 0.1)
    min_transactions: int = 1
    # model roster and per-family knobs
    roster: tuple = MODEL_FAMILIES
    arx_lags: int = 48
    arx_seasonal_dummies: bool = False
    # desk-scale training sets overfit the library defaults, so experiment
    # runs get a leaf floor and validation-based ensemble truncation
    gbt: GbtConfig = GbtConfig(min_samples_leaf=20)
    gbt_early_stop: bool = True
    rnn_cell: str = "gru"
    rnn_hidden: int = 12
    rnn_bidirectional: bool = False
    rnn_max_epochs: int = 30
    rnn_patience: int | None = 10
    rnn_lr: float = 1e-3
    rnn_batch_size: int = 32
    seq_len: int = 48
    # federation
    n_hubs: int = 1
    fed_plan: FederationPlan = FederationPlan()
    fedxgb_plan: FedXgbPlan = FedXgbPlan()
    # misc
    seed: int = 0
    joules_per_op: float = 1e-9

    def __post_init__(self):
        if self.n_hubs < 1:
            raise ConfigError("n_hubs must be at least 1")
        if not self.roster:
            raise ConfigError("model roster is empty")
        unknown = sorted(set(self.roster) - set(MODEL_FAMILIES))
        if unknown:
            raise ConfigError(f"unknown model families in roster: {unknown}")
        if self.source_csv is None and (self.synthetic_evse < 1 or self.synthetic_days < 1):
            raise ConfigError("synthetic runs need at least one EVSE and one day")


@dataclass
class PreparedData:
    """Shared ingest/feature output; centralized and federated runs both
    consume this, so their feature frames are identical by construction."""

    transactions: list
    dropped: list
    series: dict
    split: TemporalSplit
    norm: NormalizationSpec
    frames: dict
    meta: dict
    loc_vocab: dict
    model_vocab: dict

    def frame_hashes(self) -> dict:
        return {e: self.frames[e].content_hash() for e in sorted(self.frames)}


@dataclass
class RunResult:
    mode: str
    models: dict
    report: dict
    ledger: EnergyLedger
    round_logs: dict
    hub_assignment: HubAssignment | None
    prepared: PreparedData


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    with _stage("ingest"):
        if cfg.source_csv is None:
            txs = generate_synthetic(cfg.synthetic_evse, cfg.synthetic_days,
                                     cfg.seed, cfg.synthetic_profile)
        else:
            with open(cfg.source_csv, newline="") as fh:
                txs, _ = parse_transactions(fh, schema={})
        kept, dropped = clean_transactions(txs, min_transactions=cfg.min_transactions)
        if not kept:
            raise ConfigError("no transactions survive cleaning")
        series = resample_demand(kept, sr_freq=timedelta(hours=cfg.bin_hours))
        meta = evse_metadata(kept)
    with _stage("features"):
        axis_length = len(next(iter(series.values())))
        split = split_temporal(axis_length, cfg.split_ratios)
        declared = {e: m.nominal_power_kw for e, m in meta.items()
                    if m.nominal_power_kw is not None}
        norm = compute_normalization(series, split, nominal_power=declared or None)
        frames = {e: build_feature_frame(series[e], norm, split) for e in sorted(series)}
    loc_vocab = {e: i for i, e in enumerate(sorted(frames))}
    model_vocab = {m: i for i, m in enumerate(sorted({meta[e].evse_model for e in frames}))}
    return PreparedData(transactions=kept, dropped=dropped, series=series, split=split,
                        norm=norm, frames=frames, meta=meta, loc_vocab=loc_vocab,
                        model_vocab=model_vocab)


# ---------------------------------------------------------------------------
# shared prediction/metrics plumbing

def _gbt_fit_ops(n_rows: int, n_features: int, config: GbtConfig) -> float:
    # split search touches every (row, feature) pair once per level per tree
    return float(config.n_trees) * config.max_depth * n_rows * n_features


def _pooled_block(prepared: PreparedData, members, block: str, names):
    xs, ys = [], []
    for evse_id in members:
        frame = prepared.frames[evse_id]
        mask = frame.block_mask(prepared.split, block)
        xs.append(frame.columns(names)[mask])
        ys.append(frame.target[mask])
    return np.vstack(xs), np.concatenate(ys)


def _metrics_block(prepared: PreparedData, preds_kw: Mapping[str, np.ndarray]) -> dict:
    per_evse = {}
    for evse_id in sorted(preds_kw):
        frame = prepared.frames[evse_id]
        mask = frame.block_mask(prepared.split, "test")
        y_kw = frame.denormalize(frame.target[mask])
        train_kw = np.asarray(
            prepared.series[evse_id].values[: prepared.split.train_end_index], dtype=float
        )
        per_evse[evse_id] = evaluate_forecast(y_kw, preds_kw[evse_id], train_kw)
    return quantile_report(per_evse)


def _rnn_config(cfg: ExperimentConfig, prepared: PreparedData) -> RnnConfig:
    return RnnConfig(cell=cfg.rnn_cell, hidden_size=cfg.rnn_hidden,
                     bidirectional=cfg.rnn_bidirectional,
                     step_input=len(RNN_STEP_FEATURE_NAMES),
                     n_locations=len(prepared.loc_vocab),
                     n_models=len(prepared.model_vocab),
                     loc_emb_dim=LOC_EMB_DIM, model_emb_dim=MODEL_EMB_DIM,
                     dense_size=DENSE_SIZE, dropout=DROPOUT, seq_len=cfg.seq_len)


def _sequence_dataset(cfg: ExperimentConfig, prepared: PreparedData, members) -> dict:
    frames = {e: prepared.frames[e] for e in members}
    evse_models = {e: prepared.meta[e].evse_model for e in members}
    nominal_scale = {
        e: prepared.norm.nominal_for(e) / prepared.norm.nominal_max_kw for e in members
    }
    return build_sequence_dataset(frames, prepared.split, prepared.loc_vocab,
                                  prepared.model_vocab, evse_models, nominal_scale,
                                  seq_len=cfg.seq_len)


def _rnn_predictions(cfg, prepared, model: RnnModel, params: np.ndarray) -> dict:
    preds = {}
    for evse_id in sorted(prepared.frames):
        test = _sequence_dataset(cfg, prepared, [evse_id])["test"]
        if len(test) == 0:
            continue
        normalized = model.predict(params, test)
        preds[evse_id] = np.clip(normalized, 0.0, None) * prepared.norm.nominal_for(evse_id)
    return preds


def _seasonal_naive_predictions(prepared: PreparedData) -> dict:
    preds = {}
    for evse_id, frame in prepared.frames.items():
        values = np.asarray(prepared.series[evse_id].values, dtype=float)
        forecast = seasonal_naive(values, DEFAULT_SEASON_BINS)
        mask = frame.block_mask(prepared.split, "test")
        preds[evse_id] = forecast[(frame.bin_index + 1)[mask]]
    return preds


def _fit_arx_per_evse(cfg, prepared, ledger, meter):
    """The statistical family never leaves its station: one fit per EVSE.

    Twelve-hour bins pin the hour-of-day angle to 0 and pi, so one harmonic
    column is numerically zero and every fit takes the ridge fallback. The
    fallback flag lands in the saved payload per station; the per-fit warning
    is silenced here because it would fire once per EVSE on every plain run.
    """
    models, orders, preds = {}, {}, {}
    for evse_id in sorted(prepared.frames):
        values = np.asarray(prepared.series[evse_id].values, dtype=float)
        exog = exogenous_matrix(prepared.series[evse_id], prepared.norm)
        n_lags = max(1, min(cfg.arx_lags, len(values) // 4))
        config = ArxConfig(n_lags=n_lags, seasonal_dummies=cfg.arx_seasonal_dummies)
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message=".*rank-deficient.*",
                                    category=UserWarning)
            model = fit_arx(values, exog, prepared.split, config, evse_id=evse_id)
        n_cols = len(model.coef)
        ledger.record("centralized", evse_id, 0, 1,
                      meter.joules(float(len(values)) * n_cols * n_cols), model="arx")
        frame = prepared.frames[evse_id]
        mask = frame.block_mask(prepared.split, "test")
        preds[evse_id] = model.predict_all(values, exog)[(frame.bin_index + 1)[mask]]
        models[evse_id] = model
        orders[evse_id] = n_lags
    return models, orders, preds


def _best_prefix(model, X_valid, y_valid) -> int:
    """Boosting stage count with the lowest validation pinball loss.

    Scanning prefixes after a full fit is equivalent to early stopping with
    unlimited patience; ties resolve to the shortest ensemble and the
    constant-only model counts as stage zero (floored to one kept tree).
    """
    pred = np.full(len(y_valid), model.init_value)
    best, best_loss = 0, pinball_loss(y_valid, pred, model.config.alpha)
    for i, tree in enumerate(model.trees):
        pred = pred + model.config.learning_rate * tree.predict(X_valid)
        loss = pinball_loss(y_valid, pred, model.config.alpha)
        if loss < best_loss - 1e-12:
            best, best_loss = i + 1, loss
    return max(best, 1)


def _fit_gbt_pooled(cfg, prepared, ledger, meter, members=None):
    members = sorted(prepared.frames) if members is None else members
    X_train, y_train = _pooled_block(prepared, members, "train", GBT_FEATURE_NAMES)
    model = fit_gbt(X_train, y_train, cfg.gbt, feature_names=GBT_FEATURE_NAMES)
    if cfg.gbt_early_stop:
        X_valid, y_valid = _pooled_block(prepared, members, "valid", GBT_FEATURE_NAMES)
        kept = _best_prefix(model, X_valid, y_valid)
        model = BoostedTreesModel(config=replace(cfg.gbt, n_trees=kept),
                                  init_value=model.init_value,
                                  trees=model.trees[:kept],
                                  feature_names=model.feature_names)
    # joules reflect the full fit; the epoch column reports what was kept
    ledger.record("centralized", "server", 0, model.n_trees,
                  meter.joules(_gbt_fit_ops(len(y_train), X_train.shape[1], cfg.gbt)),
                  model="gbt")
    preds = {}
    for evse_id in members:
        frame = prepared.frames[evse_id]
        mask = frame.block_mask(prepared.split, "test")
        preds[evse_id] = model.predict_kw(frame.columns(GBT_FEATURE_NAMES)[mask],
                                          prepared.norm.nominal_for(evse_id))
    return model, preds


# ---------------------------------------------------------------------------
# centralized experiment

def run_centralized(cfg: ExperimentConfig, prepared: PreparedData | None = None) -> RunResult:
    if prepared is None:
        prepared = prepare_data(cfg)
    ledger = EnergyLedger()
    meter = OpCountMeter(cfg.joules_per_op)
    models: dict = {}
    blocks: dict = {}

    if "seasonal-naive" in cfg.roster:
        with _stage("seasonal-naive"):
            blocks["seasonal-naive"] = _metrics_block(prepared, _seasonal_naive_predictions(prepared))
            models["seasonal-naive"] = {"season_bins": DEFAULT_SEASON_BINS}

    if "arx" in cfg.roster:
        with _stage("arx"):
            arx_models, orders, preds = _fit_arx_per_evse(cfg, prepared, ledger, meter)
            blocks["arx"] = _metrics_block(prepared, preds)
            models["arx"] = {"models": {e: m.to_payload() for e, m in arx_models.items()},
                             "orders": orders}

    if "gbt" in cfg.roster:
        with _stage("gbt"):
            gbt_model, preds = _fit_gbt_pooled(cfg, prepared, ledger, meter)
            blocks["gbt"] = _metrics_block(prepared, preds)
            models["gbt"] = gbt_model.to_payload()

    if "rnn" in cfg.roster:
        with _stage("rnn"):
            config = _rnn_config(cfg, prepared)
            data = _sequence_dataset(cfg, prepared, sorted(prepared.frames))
            trainer, history = fit_rnn(config, data["train"], data["valid"],
                                       seed=cfg.seed, max_epochs=cfg.rnn_max_epochs,
                                       patience=cfg.rnn_patience, lr=cfg.rnn_lr,
                                       batch_size=cfg.rnn_batch_size)
            ledger.record("centralized", "server", 0, trainer.epochs_done,
                          meter.joules(trainer.epochs_done * trainer.ops_per_epoch),
                          model="rnn")
            preds = _rnn_predictions(cfg, prepared, trainer.model, trainer.get_params())
            block = _metrics_block(prepared, preds)
            block["history"] = history
            blocks["rnn"] = block
            models["rnn"] = {"config": asdict(config), "params": trainer.get_params()}

    report = {
        "mode": "centralized",
        "n_evse": len(prepared.frames),
        "axis_length": prepared.split.axis_length,
        "frame_hashes": prepared.frame_hashes(),
        "models": blocks,
    }
    return RunResult(mode="centralized", models=models, report=report, ledger=ledger,
                     round_logs={}, hub_assignment=None, prepared=prepared)


# ---------------------------------------------------------------------------
# federated experiment

def run_federated(cfg: ExperimentConfig, prepared: PreparedData | None = None) -> RunResult:
    if prepared is None:
        prepared = prepare_data(cfg)
    ledger = EnergyLedger()
    meter = OpCountMeter(cfg.joules_per_op)
    phase = cfg.fed_plan.phase
    models: dict = {}
    blocks: dict = {}
    round_logs: dict = {}

    with _stage("clustering"):
        locations = {e: (prepared.meta[e].lat, prepared.meta[e].lon)
                     for e in prepared.frames}
        hubs = cluster_hubs(locations, cfg.n_hubs, seed=cfg.seed)
    hub_members = {h: hubs.members(h) for h in hubs.hubs()}

    def per_hub_quantiles(block):
        return {
            str(h): quantile_report(
                {e: block["per_evse"][e] for e in members if e in block["per_evse"]}
            )["quantiles"]
            for h, members in hub_members.items()
        }

    # families without a federated form keep their per-station/centralized fits
    if "seasonal-naive" in cfg.roster:
        with _stage("seasonal-naive"):
            block = _metrics_block(prepared, _seasonal_naive_predictions(prepared))
            block["per_hub"] = per_hub_quantiles(block)
            blocks["seasonal-naive"] = block
            models["seasonal-naive"] = {"season_bins": DEFAULT_SEASON_BINS}

    if "arx" in cfg.roster:
        with _stage("arx"):
            arx_models, orders, preds = _fit_arx_per_evse(cfg, prepared, ledger, meter)
            block = _metrics_block(prepared, preds)
            block["per_hub"] = per_hub_quantiles(block)
            blocks["arx"] = block
            models["arx"] = {"models": {e: m.to_payload() for e, m in arx_models.items()},
                             "orders": orders}

    if "gbt" in cfg.roster:
        with _stage("gbt-federation"):
            client_cfg = replace(cfg.gbt, n_trees=cfg.fedxgb_plan.trees_per_client)
            client_models = {}
            for h, members in hub_members.items():
                X_train, y_train = _pooled_block(prepared, members, "train",
                                                 GBT_FEATURE_NAMES)
                client_models[h] = fit_gbt(X_train, y_train, client_cfg,
                                           feature_names=GBT_FEATURE_NAMES)
                ledger.record(phase, f"hub{h}", 0, client_cfg.n_trees,
                              meter.joules(_gbt_fit_ops(len(y_train), X_train.shape[1],
                                                        client_cfg)),
                              model="gbt")
            ensemble = fedxgb_aggregate_ensembles(client_models)
            client_data = {}
            for h, members in hub_members.items():
                X_train, y_train = _pooled_block(prepared, members, "train",
                                                 GBT_FEATURE_NAMES)
                X_valid, y_valid = _pooled_block(prepared, members, "valid",
                                                 GBT_FEATURE_NAMES)
                client_data[h] = (ensemble.tree_outputs(X_train), y_train,
                                  ensemble.tree_outputs(X_valid), y_valid)
            combine, result = fedxgb_train_weights(ensemble, client_data,
                                                   cfg.fedxgb_plan, ledger=ledger,
                                                   meter=meter, model_tag="gbt",
                                                   phase=phase)
            round_logs["gbt"] = result.rounds
            preds = {}
            for evse_id in sorted(prepared.frames):
                frame = prepared.frames[evse_id]
                mask = frame.block_mask(prepared.split, "test")
                outputs = ensemble.tree_outputs(frame.columns(GBT_FEATURE_NAMES)[mask])
                preds[evse_id] = combine.predict_kw(outputs,
                                                    prepared.norm.nominal_for(evse_id))
            block = _metrics_block(prepared, preds)
            block["per_hub"] = per_hub_quantiles(block)
            blocks["gbt"] = block
            models["gbt"] = {
                "clients": {str(h): m.to_payload() for h, m in client_models.items()},
                "combine": combine.to_payload(),
                "hub_ids": list(ensemble.hub_ids),
                "trees_per_client": ensemble.trees_per_client,
            }

    if "rnn" in cfg.roster:
        with _stage("rnn-federation"):
            config = _rnn_config(cfg, prepared)
            shared_model = RnnModel(config)
            trainers = {}
            for h, members in hub_members.items():
                data = _sequence_dataset(cfg, prepared, members)
                trainers[h] = RnnTrainer(shared_model, data["train"], data["valid"],
                                         seed=cfg.seed + h, lr=cfg.rnn_lr,
                                         batch_size=cfg.rnn_batch_size)
            result = run_federation(cfg.fed_plan, trainers, ledger=ledger,
                                    meter=meter, model_tag="rnn")
            round_logs["rnn"] = result.rounds
            preds = _rnn_predictions(cfg, prepared, shared_model, result.params)
            block = _metrics_block(prepared, preds)
            block["per_hub"] = per_hub_quantiles(block)
            blocks["rnn"] = block
            models["rnn"] = {"config": asdict(config), "params": result.params}

    report = {
        "mode": "federated",
        "n_evse": len(prepared.frames),
        "n_hubs": cfg.n_hubs,
        "phase": phase,
        "axis_length": prepared.split.axis_length,
        "frame_hashes": prepared.frame_hashes(),
        "hub_members": {str(h): members for h, members in hub_members.items()},
        "models": blocks,
    }
    return RunResult(mode="federated", models=models, report=report, ledger=ledger,
                     round_logs=round_logs, hub_assignment=hubs, prepared=prepared)


# ---------------------------------------------------------------------------
# energy study

def run_energy_study(cfg: ExperimentConfig, prepared: PreparedData | None = None) -> dict:
    """Centralized run plus heavy and light federated phases, one shared ledger.

    Heavy and light differ only in the sequence-model round schedule (five
    local epochs per round versus one); the boosted-tree schedule is the same
    in both phases. Returns the phase comparison with the underlying results.
    """
    if prepared is None:
        prepared = prepare_data(cfg)
    ledger = EnergyLedger()

    central = run_centralized(cfg, prepared)
    for entry in central.ledger.entries:
        ledger.entries.append(entry)

    heavy_cfg = replace(cfg, fed_plan=replace(cfg.fed_plan, local_epochs=HEAVY_LOCAL_EPOCHS))
    light_cfg = replace(cfg, fed_plan=replace(cfg.fed_plan, local_epochs=LIGHT_LOCAL_EPOCHS))
    heavy = run_federated(heavy_cfg, prepared)
    light = run_federated(light_cfg, prepared)
    for run in (heavy, light):
        for entry in run.ledger.entries:
            ledger.entries.append(entry)

    return {
        "comparison": phase_comparison(ledger),
        "ledger": ledger,
        "centralized": central,
        "heavy": heavy,
        "light": light,
    }


# ---------------------------------------------------------------------------
# artifacts

def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def write_manifest(out_dir, mode: str, seed: int, overrides: dict | None = None) -> dict:
    """Hash every file under ``out_dir`` into ``manifest.json``.

    No timestamps and no absolute paths, so rerunning the same config yields
    a byte-identical manifest. ``overrides`` echoes the flag values a caller
    applied on top of its base configuration.
    """
    out = Path(out_dir)
    artifacts = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts[path.relative_to(out).as_posix()] = _sha256_file(path)
    manifest = {"mode": mode, "seed": seed, "artifacts": artifacts}
    if overrides is not None:
        manifest["overrides"] = dict(sorted(overrides.items()))
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_run_artifacts(result: RunResult, cfg: ExperimentConfig, out_dir,
                        overrides: dict | None = None) -> dict:
    """Write every artifact under ``out_dir`` and a manifest of content hashes."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)

    with open(out / "config.json", "w") as fh:
        json.dump(config_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "report.json", "w") as fh:
        write_report_json(result.report, fh)
    with open(out / "ledger.csv", "w") as fh:
        write_ledger_csv(result.ledger, fh)
    for family, records in sorted(result.round_logs.items()):
        with open(out / f"rounds_{family}.jsonl", "w") as fh:
            write_round_log(records, fh)
    for family, payload in sorted(result.models.items()):
        save_model(out / "models" / f"{family}.json", family, payload)
    return write_manifest(out, result.mode, cfg.seed, overrides)
