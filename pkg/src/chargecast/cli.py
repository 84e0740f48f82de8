"""Command-line front end for the experiment workbench.

Subcommands: ``synth`` writes a synthetic transaction file, ``ingest`` bins a
transaction file into per-station demand series, ``train`` runs the
centralized pipeline, ``federate`` the federated one, ``evaluate`` re-scores a
finished run's saved models, and ``report`` runs the three-phase energy study.

Exit codes are the scripting contract: 0 success, 1 bad invocation or config,
2 runtime failure. Progress goes to standard error; the output directory gets
machine artifacts only, pinned by a manifest of content hashes. Flags beat
config-file values, and every flag the user set is echoed into the manifest.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import timedelta
from pathlib import Path
from typing import Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .energy import write_ledger_csv
from .errors import ConfigError
from .features import GBT_FEATURE_NAMES, exogenous_matrix
from .federation import (
    FederationPlan,
    FedXgbPlan,
    TreeWeightModel,
    fedxgb_aggregate_ensembles,
)
from .forecasters import BoostedTreesModel, GbtConfig, RnnConfig, RnnModel, load_model
from .forecasters.arx import ArxModel
from .ingest import (
    SyntheticProfile,
    cleaning_report,
    clean_transactions,
    generate_synthetic,
    parse_transactions,
    resample_demand,
    write_demand_csv,
    write_transactions_csv,
)
from .metrics import write_report_json
from .workbench import (
    MODEL_FAMILIES,
    ExperimentConfig,
    _metrics_block,
    _rnn_predictions,
    _seasonal_naive_predictions,
    prepare_data,
    run_centralized,
    run_energy_study,
    run_federated,
    write_manifest,
    write_run_artifacts,
)

OUT_ROOT_ENV = "CHARGECAST_OUT"

_NESTED_CONFIGS = {
    "gbt": GbtConfig,
    "fed_plan": FederationPlan,
    "fedxgb_plan": FedXgbPlan,
    "synthetic_profile": SyntheticProfile,
}


class UsageError(Exception):
    """Bad invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2) on bad flags; route through the 0/1/2 contract
    def error(self, message):
        raise UsageError(message)


def _build_dataclass(cls, mapping: Mapping, context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown {context} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        nested = _NESTED_CONFIGS.get(key)
        if nested is not None and isinstance(value, Mapping):
            kwargs[key] = _build_dataclass(nested, value, context=key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_mapping(mapping: Mapping) -> ExperimentConfig:
    """Build an experiment config from parsed structured text (TOML/JSON)."""
    try:
        return _build_dataclass(ExperimentConfig, mapping, context="config")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(p, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc


def _out_dir(args, default_name: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def _progress(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _add_common(parser) -> None:
    parser.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV} "
                                      "or ./runs, plus a per-command name)")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress lines on stderr")


def _add_experiment_flags(parser) -> None:
    parser.add_argument("--config", help="TOML experiment config; flags given here "
                                         "override values from the file")
    parser.add_argument("--source", dest="source_csv",
                        help="transactions CSV (default: synthetic generator)")
    parser.add_argument("--evse", dest="synthetic_evse", type=int,
                        help="synthetic station count")
    parser.add_argument("--days", dest="synthetic_days", type=int,
                        help="synthetic day count")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--model", dest="roster", action="append",
                        choices=MODEL_FAMILIES,
                        help="restrict the model roster (repeatable)")


def build_parser() -> _Parser:
    parser = _Parser(prog="chargecast",
                     description="EVSE demand forecasting workbench")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic transaction file",
                       description="Generate a reproducible synthetic fleet and "
                                   "write transactions.csv plus a manifest.")
    p.add_argument("--evse", type=int, default=8, help="station count (default 8)")
    p.add_argument("--days", type=int, default=120, help="day count (default 120)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    _add_common(p)

    p = sub.add_parser("ingest", help="bin a transaction file into demand series",
                       description="Parse, clean, and bin transactions; write one "
                                   "demand CSV per station plus cleaning stats.")
    p.add_argument("--source", required=True, help="transactions CSV to ingest")
    p.add_argument("--bin-hours", type=float, default=12.0,
                   help="bin width in hours (default 12)")
    p.add_argument("--min-transactions", type=int, default=1,
                   help="minimum retained transactions per station (default 1)")
    _add_common(p)

    p = sub.add_parser("train", help="run the centralized pipeline",
                       description="Train the roster on pooled data and write "
                                   "models, report, ledger, and manifest.")
    _add_experiment_flags(p)
    _add_common(p)

    p = sub.add_parser("federate", help="run the federated pipeline",
                       description="Cluster stations into hubs and train by "
                                   "rounds; writes the same artifact set.")
    _add_experiment_flags(p)
    p.add_argument("--hubs", dest="n_hubs", type=int, help="hub count k")
    p.add_argument("--strategy", choices=("fedavg", "fedprox"),
                   help="aggregation strategy")
    p.add_argument("--mu", type=float, help="proximal coefficient for fedprox")
    p.add_argument("--rounds", type=int, help="federation rounds")
    p.add_argument("--epochs", type=int, help="local epochs per round")
    _add_common(p)

    p = sub.add_parser("evaluate", help="re-score a finished run's models",
                       description="Load config.json and saved models from a run "
                                   "directory, rebuild the data, and re-score the "
                                   "test block (optionally on another source).")
    p.add_argument("--run", required=True, help="finished run directory")
    p.add_argument("--source", help="transactions CSV to score on instead of the "
                                    "run's own source")
    _add_common(p)

    p = sub.add_parser("report", help="run the three-phase energy study",
                       description="Centralized plus heavy and light federated "
                                   "phases on one ledger; writes the phase "
                                   "comparison with CO2 overheads.")
    _add_experiment_flags(p)
    p.add_argument("--hubs", dest="n_hubs", type=int, help="hub count k")
    _add_common(p)

    return parser


# ---------------------------------------------------------------------------
# flag merging


def _experiment_overrides(args) -> dict:
    """Flag values the user actually set, keyed like the config mapping."""
    overrides: dict = {}
    for name in ("source_csv", "synthetic_evse", "synthetic_days", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "roster", None):
        overrides["roster"] = tuple(dict.fromkeys(args.roster))
    if getattr(args, "n_hubs", None) is not None:
        overrides["n_hubs"] = args.n_hubs
    plan_flags = {key: getattr(args, attr)
                  for key, attr in (("strategy", "strategy"), ("mu", "mu"),
                                    ("rounds", "rounds"), ("local_epochs", "epochs"))
                  if getattr(args, attr, None) is not None}
    if plan_flags:
        overrides["fed_plan"] = plan_flags
    return overrides


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        elif isinstance(value, dict) and key in _NESTED_CONFIGS:
            merged[key] = value
        else:
            merged[key] = value
    return merged


def _manifest_overrides(overrides: dict) -> dict:
    flat = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            for sub_key, sub_value in value.items():
                flat[f"{key}.{sub_key}"] = sub_value
        elif isinstance(value, tuple):
            flat[key] = list(value)
        else:
            flat[key] = value
    return flat


def _experiment_config(args) -> tuple[ExperimentConfig, dict]:
    base = load_config(getattr(args, "config", None))
    overrides = _experiment_overrides(args)
    cfg = config_from_mapping(_merge(base, overrides))
    return cfg, _manifest_overrides(overrides)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    out = _out_dir(args, f"synth-seed{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    txs = generate_synthetic(args.evse, args.days, args.seed)
    _progress(args, f"generated {len(txs)} transactions "
                    f"for {args.evse} stations over {args.days} days")
    with open(out / "transactions.csv", "w", newline="") as fh:
        write_transactions_csv(txs, fh)
    write_manifest(out, "synth", args.seed,
                   overrides={"evse": args.evse, "days": args.days})
    _progress(args, f"wrote {out / 'transactions.csv'}")
    return 0


def _cmd_ingest(args) -> int:
    out = _out_dir(args, "ingest")
    out.mkdir(parents=True, exist_ok=True)
    with open(args.source, newline="") as fh:
        txs, rejected = parse_transactions(fh, schema={})
    kept, dropped = clean_transactions(txs, min_transactions=args.min_transactions)
    if not kept:
        raise ConfigError("no transactions survive cleaning")
    series = resample_demand(kept, sr_freq=timedelta(hours=args.bin_hours))
    _progress(args, f"kept {len(kept)}/{len(txs)} transactions "
                    f"({len(rejected)} rejected rows) across {len(series)} stations")
    for evse_id, demand in sorted(series.items()):
        with open(out / f"demand_{evse_id}.csv", "w", newline="") as fh:
            write_demand_csv(demand, fh)
    stats = cleaning_report(txs, kept, dropped)
    stats["rejected_rows"] = len(rejected)
    with open(out / "cleaning.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "ingest", 0,
                   overrides={"bin_hours": args.bin_hours,
                              "min_transactions": args.min_transactions})
    _progress(args, f"wrote {len(series)} demand series to {out}")
    return 0


def _summarize(args, result) -> None:
    for family in sorted(result.report["models"]):
        quantiles = result.report["models"][family]["quantiles"]
        mase = quantiles["mase"].get("q50")
        shown = "undefined" if mase is None else f"{mase:.3f}"
        _progress(args, f"  {family}: median MASE {shown}")


def _cmd_train(args) -> int:
    cfg, overrides = _experiment_config(args)
    out = _out_dir(args, f"train-seed{cfg.seed}")
    _progress(args, f"centralized run: {len(cfg.roster)} families, seed {cfg.seed}")
    result = run_centralized(cfg)
    _summarize(args, result)
    write_run_artifacts(result, cfg, out, overrides=overrides)
    _progress(args, f"artifacts in {out}")
    return 0


def _cmd_federate(args) -> int:
    cfg, overrides = _experiment_config(args)
    out = _out_dir(args, f"federate-seed{cfg.seed}")
    _progress(args, f"federated run: k={cfg.n_hubs} hubs, "
                    f"{cfg.fed_plan.strategy}, {cfg.fed_plan.phase}, seed {cfg.seed}")
    result = run_federated(cfg)
    _summarize(args, result)
    write_run_artifacts(result, cfg, out, overrides=overrides)
    _progress(args, f"artifacts in {out}")
    return 0


def _cmd_report(args) -> int:
    cfg, overrides = _experiment_config(args)
    out = _out_dir(args, f"report-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    _progress(args, f"energy study: centralized vs fed-heavy vs fed-light, "
                    f"k={cfg.n_hubs}, seed {cfg.seed}")
    study = run_energy_study(cfg)
    with open(out / "energy_report.json", "w") as fh:
        json.dump(study["comparison"], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "ledger.csv", "w") as fh:
        write_ledger_csv(study["ledger"], fh)
    write_manifest(out, "report", cfg.seed, overrides=overrides)
    for family, row in sorted(study["comparison"]["models"].items()):
        _progress(args, f"  {family}: light vs heavy savings "
                        f"{row['light_vs_heavy_savings_pct']:.1f}%")
    _progress(args, f"artifacts in {out}")
    return 0


def _predict_family(family: str, payload: dict, prepared) -> dict:
    """Test-block kW predictions for one saved model payload."""
    if family == "seasonal-naive":
        return _seasonal_naive_predictions(prepared)
    if family == "arx":
        preds = {}
        for evse_id, model_payload in payload["models"].items():
            if evse_id not in prepared.frames:
                continue
            model = ArxModel.from_payload(model_payload)
            values = np.asarray(prepared.series[evse_id].values, dtype=float)
            exog = exogenous_matrix(prepared.series[evse_id], prepared.norm)
            frame = prepared.frames[evse_id]
            mask = frame.block_mask(prepared.split, "test")
            preds[evse_id] = model.predict_all(values, exog)[(frame.bin_index + 1)[mask]]
        return preds
    if family == "rnn":
        config = RnnConfig(**payload["config"])
        model = RnnModel(config)
        cfg = ExperimentConfig(seq_len=config.seq_len)
        return _rnn_predictions(cfg, prepared, model, np.asarray(payload["params"]))
    if family == "gbt":
        if "combine" in payload:  # federated ensemble: clients plus combine layer
            clients = {int(h): BoostedTreesModel.from_payload(p)
                       for h, p in payload["clients"].items()}
            ensemble = fedxgb_aggregate_ensembles(clients)
            combine = TreeWeightModel.from_payload(payload["combine"])

            def predict(X, nominal):
                return combine.predict_kw(ensemble.tree_outputs(X), nominal)
        else:
            model = BoostedTreesModel.from_payload(payload)
            predict = model.predict_kw
        preds = {}
        for evse_id, frame in prepared.frames.items():
            mask = frame.block_mask(prepared.split, "test")
            preds[evse_id] = predict(frame.columns(GBT_FEATURE_NAMES)[mask],
                                     prepared.norm.nominal_for(evse_id))
        return preds
    raise ConfigError(f"no evaluator for model family {family!r}")


def _cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.json"
    if not config_path.is_file():
        raise ConfigError(f"{args.run} has no config.json; is it a run directory?")
    with open(config_path) as fh:
        mapping = json.load(fh)
    if args.source is not None:
        mapping["source_csv"] = args.source
    cfg = config_from_mapping(mapping)
    out = _out_dir(args, f"evaluate-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)

    model_files = sorted((run_dir / "models").glob("*.json"))
    if not model_files:
        raise ConfigError(f"{args.run} has no saved models to evaluate")
    prepared = prepare_data(cfg)
    blocks = {}
    for path in model_files:
        family, payload = load_model(path)
        preds = _predict_family(family, payload, prepared)
        blocks[family] = _metrics_block(prepared, preds)
        _progress(args, f"  {family}: median MASE "
                        f"{blocks[family]['quantiles']['mase'].get('q50', float('nan')):.3f}")
    report = {
        "mode": "evaluate",
        "run": run_dir.name,
        "n_evse": len(prepared.frames),
        "models": blocks,
    }
    with open(out / "evaluation.json", "w") as fh:
        write_report_json(report, fh)
    overrides = {"source_csv": args.source} if args.source else {}
    write_manifest(out, "evaluate", cfg.seed, overrides=overrides)
    _progress(args, f"artifacts in {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "train": _cmd_train,
    "federate": _cmd_federate,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
