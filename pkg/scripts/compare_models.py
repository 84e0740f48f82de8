#!/usr/bin/env python3
"""Centralized versus federated accuracy on a synthetic fleet.

Runs every model family both ways on the same generated data and prints the
cross-station median of each metric, plus where the federated runs spent
their training energy. Artifacts land under --out when given.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from chargecast.federation import FederationPlan, FedXgbPlan
from chargecast.workbench import (
    ExperimentConfig,
    prepare_data,
    run_centralized,
    run_federated,
    write_run_artifacts,
)

METRICS = ("mase", "smape", "wape", "rmse")


def median_row(block: dict) -> str:
    cells = []
    for name in METRICS:
        value = block["quantiles"][name].get("q50")
        cells.append(f"{value:8.3f}" if value is not None else "     n/a")
    return "".join(cells)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--evse", type=int, default=8)
    ap.add_argument("--days", type=int, default=120)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--hubs", type=int, default=2)
    ap.add_argument("--rounds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--rnn-epochs", type=int, default=20)
    ap.add_argument("--out", help="also write both runs' artifacts here")
    args = ap.parse_args()

    cfg = ExperimentConfig(
        synthetic_evse=args.evse,
        synthetic_days=args.days,
        seed=args.seed,
        n_hubs=args.hubs,
        rnn_max_epochs=args.rnn_epochs,
        fed_plan=FederationPlan(rounds=args.rounds, local_epochs=args.epochs),
        fedxgb_plan=FedXgbPlan(rounds=args.rounds),
    )
    prepared = prepare_data(cfg)
    print(f"fleet: {len(prepared.frames)} stations, "
          f"{prepared.split.axis_length} bins, seed {args.seed}")

    central = run_centralized(cfg, prepared)
    federated = run_federated(cfg, prepared)

    header = "".join(f"{m:>8}" for m in METRICS)
    print(f"\n{'centralized':<24}{header}")
    for family in sorted(central.report["models"]):
        print(f"  {family:<22}{median_row(central.report['models'][family])}")
    print(f"\n{'federated (k=%d)' % args.hubs:<24}{header}")
    for family in sorted(federated.report["models"]):
        print(f"  {family:<22}{median_row(federated.report['models'][family])}")

    joules = {}
    for entry in federated.ledger.entries:
        joules[entry.model] = joules.get(entry.model, 0.0) + entry.joules
    print("\nfederated training energy (J):")
    for model, total in sorted(joules.items()):
        print(f"  {model:<22}{total:12.6f}")

    if args.out:
        out = Path(args.out)
        write_run_artifacts(central, cfg, out / "centralized")
        write_run_artifacts(federated, cfg, out / "federated")
        print(f"\nartifacts in {out}/centralized and {out}/federated")
    return 0


if __name__ == "__main__":
    sys.exit(main())
