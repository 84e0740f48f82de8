"""Training-energy accounting: ledger, meters, log-ratio, CO2 overhead.

Communication energy is deliberately out of scope; only compute spent in
training loops is metered. The default meter is a deterministic operation
counter so energy numbers are reproducible on any machine; wall-clock metering
against an assumed device wattage is opt-in.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

PHASES = ("centralized", "fed-heavy", "fed-light")
JOULES_PER_KWH = 3.6e6
DEFAULT_J_PER_OP = 1e-9


@dataclass(frozen=True)
class EmissionFactor:
    """Grid carbon intensity in kg CO2e per kWh."""

    kg_per_kwh: float
    vintage: str = "unspecified"

    def __post_init__(self):
        if not self.kg_per_kwh > 0:
            raise ValueError(f"emission factor must be positive, got {self.kg_per_kwh}")


DEFAULT_EMISSION_FACTOR = EmissionFactor(0.289, vintage="grid average")


@dataclass(frozen=True)
class LedgerEntry:
    phase: str    # centralized | fed-heavy | fed-light
    model: str    # forecaster tag, e.g. "gbt" or "rnn"
    scope: str    # client id or "server"
    round: int
    epoch: int
    joules: float


@dataclass
class EnergyLedger:
    """Append-only record of energy spent, one entry per metered unit of work."""

    meter_kind: str = "op-count"
    device_watts: float | None = None
    entries: list = field(default_factory=list)

    def record(self, phase: str, scope: str, round_idx: int, epoch: int,
               joules: float, model: str = "") -> LedgerEntry:
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
        if not (math.isfinite(joules) and joules >= 0):
            raise ValueError(f"joules must be finite and non-negative, got {joules}")
        entry = LedgerEntry(phase=phase, model=model, scope=scope,
                            round=round_idx, epoch=epoch, joules=float(joules))
        self.entries.append(entry)
        return entry

    def _selected(self, phase=None, model=None, scope=None):
        picked = [
            e for e in self.entries
            if (phase is None or e.phase == phase)
            and (model is None or e.model == model)
            and (scope is None or e.scope == scope)
        ]
        # canonical order makes totals independent of insertion order, bit for bit
        picked.sort(key=lambda e: (e.phase, e.model, e.scope, e.round, e.epoch, e.joules))
        return picked

    def total_joules(self, phase=None, model=None, scope=None) -> float:
        total = 0.0
        for entry in self._selected(phase, model, scope):
            total += entry.joules
        return total

    def client_round_averages(self, phase=None, model=None) -> dict:
        """Mean joules per round for every non-server scope."""
        sums: dict[str, float] = {}
        rounds: dict[str, set] = {}
        for entry in self._selected(phase, model):
            if entry.scope == "server":
                continue
            sums[entry.scope] = sums.get(entry.scope, 0.0) + entry.joules
            rounds.setdefault(entry.scope, set()).add(entry.round)
        return {scope: sums[scope] / max(1, len(rounds[scope])) for scope in sorted(sums)}

    def models(self) -> list:
        return sorted({e.model for e in self.entries})


class OpCountMeter:
    """Deterministic proxy: a fixed energy cost per abstract operation."""

    kind = "op-count"

    def __init__(self, j_per_op: float = DEFAULT_J_PER_OP):
        if j_per_op <= 0:
            raise ValueError(f"j_per_op must be positive, got {j_per_op}")
        self.j_per_op = j_per_op

    def joules(self, n_ops: float) -> float:
        if n_ops < 0:
            raise ValueError(f"operation count must be non-negative, got {n_ops}")
        return float(n_ops) * self.j_per_op


class WallClockMeter:
    """Elapsed time times an assumed device power draw.

    Use as a context manager; the clock is injectable for testing.
    """

    kind = "wall-clock"

    def __init__(self, watts: float, clock: Callable[[], float] = time.perf_counter):
        if watts <= 0:
            raise ValueError(f"watts must be positive, got {watts}")
        self.watts = watts
        self._clock = clock
        self._start: float | None = None
        self.elapsed_s = 0.0

    def __enter__(self) -> "WallClockMeter":
        self._start = self._clock()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed_s = self._clock() - self._start
        self._start = None

    @property
    def joules(self) -> float:
        if self.elapsed_s < 0:
            raise ValueError(f"negative elapsed time {self.elapsed_s}")
        return self.elapsed_s * self.watts


def log_ratio(fed_joules: float, centralized_joules: float) -> float:
    """Base-10 log of the federated-to-centralized energy ratio."""
    if fed_joules <= 0 or centralized_joules <= 0:
        raise ValueError(
            f"both totals must be positive, got fed={fed_joules} cent={centralized_joules}"
        )
    return math.log10(fed_joules / centralized_joules)


def joules_to_kwh(joules: float) -> float:
    return joules / JOULES_PER_KWH


def co2_overhead_grams(delta_kwh: float, ef: EmissionFactor = DEFAULT_EMISSION_FACTOR) -> float:
    """Extra emissions, in grams CO2e, of spending ``delta_kwh`` more energy."""
    if delta_kwh < 0:
        raise ValueError(f"energy overhead must be non-negative, got {delta_kwh}")
    return delta_kwh * ef.kg_per_kwh * 1000.0


def phase_comparison(ledger: EnergyLedger, ef: EmissionFactor = DEFAULT_EMISSION_FACTOR) -> dict:
    """Per-model energy summary across the three phases.

    For each model tag: totals, per-client-per-round averages, log ratios of
    each federated configuration against centralized, CO2 overhead of the
    federated extra energy (0 when federated is cheaper), and the light-vs-
    heavy percentage savings.
    """
    report: dict = {"emission_factor_kg_per_kwh": ef.kg_per_kwh, "models": {}}
    for model in ledger.models():
        cent = ledger.total_joules(phase="centralized", model=model)
        heavy = ledger.total_joules(phase="fed-heavy", model=model)
        light = ledger.total_joules(phase="fed-light", model=model)
        row: dict = {
            "centralized_j": cent,
            "fed_heavy_j": heavy,
            "fed_light_j": light,
            "client_round_avg_heavy_j": ledger.client_round_averages("fed-heavy", model),
            "client_round_avg_light_j": ledger.client_round_averages("fed-light", model),
        }
        for label, fed in (("heavy", heavy), ("light", light)):
            if fed > 0 and cent > 0:
                row[f"log_ratio_{label}"] = log_ratio(fed, cent)
                delta_kwh = joules_to_kwh(fed - cent)
                row[f"overhead_kwh_{label}"] = delta_kwh
                row[f"co2_overhead_g_{label}"] = co2_overhead_grams(max(0.0, delta_kwh), ef)
        if heavy > 0:
            row["light_vs_heavy_savings_pct"] = (heavy - light) / heavy * 100.0
        report["models"][model] = row
    return report


def write_ledger_csv(ledger: EnergyLedger, stream) -> None:
    stream.write("phase,model,scope,round,epoch,joules\n")
    for e in ledger.entries:
        stream.write(f"{e.phase},{e.model},{e.scope},{e.round},{e.epoch},{e.joules!r}\n")


def write_comparison_json(report: dict, stream) -> None:
    json.dump(report, stream, indent=2, sort_keys=True)
    stream.write("\n")
