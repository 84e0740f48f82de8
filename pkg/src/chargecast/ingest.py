"""Transaction ingestion: parsing, cleaning, resampling to demand series, splits.

A charging transaction is a single plug-in event with a start/end time and the
energy it consumed; the demand series is the per-station average power on a
regular grid of bins (12 h wide by default), where each transaction contributes
its average power weighted by the fraction of the bin it overlaps.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError

DEFAULT_SR_FREQ = timedelta(hours=12)
DEFAULT_MAX_ENERGY_KWH = 200.0
DEFAULT_MAX_DURATION_H = 48.0
DEFAULT_MIN_TRANSACTIONS = 100


@dataclass(frozen=True)
class EnergyTransaction:
    """One charging event at a single station (EVSE).

    ``avg_power_kw`` is derived: consumed energy divided by duration in hours.
    Timestamps are UTC at second resolution; sub-second input is truncated.
    """

    evse_id: str
    t_start: datetime
    t_end: datetime
    energy_kwh: float
    evse_model: str = "unknown"
    lat: float = 0.0
    lon: float = 0.0
    nominal_power_kw: float | None = None
    avg_power_kw: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "t_start", _to_utc_seconds(self.t_start))
        object.__setattr__(self, "t_end", _to_utc_seconds(self.t_end))
        if self.t_end <= self.t_start:
            raise ValueError(f"transaction must end after it starts: {self.t_start} .. {self.t_end}")
        if not math.isfinite(self.energy_kwh) or self.energy_kwh < 0:
            raise ValueError(f"energy must be a finite non-negative kWh value, got {self.energy_kwh}")
        if self.nominal_power_kw is not None and self.nominal_power_kw <= 0:
            raise ValueError(f"nominal power must be positive, got {self.nominal_power_kw}")
        object.__setattr__(self, "avg_power_kw", self.energy_kwh / self.duration_hours)

    @property
    def duration_hours(self) -> float:
        return (self.t_end - self.t_start).total_seconds() / 3600.0


@dataclass
class DemandSeries:
    """Average charging power of one EVSE per bin on a fixed, gapless grid."""

    evse_id: str
    origin: datetime
    sr_freq: timedelta
    values: np.ndarray                    # kW per bin
    sessions_per_bin: np.ndarray          # transactions overlapping each bin
    avg_charge_hours_per_bin: np.ndarray  # mean in-bin charging duration

    def __len__(self) -> int:
        return len(self.values)

    def bin_start(self, k: int) -> datetime:
        return self.origin + k * self.sr_freq

    def bin_starts(self) -> list[datetime]:
        return [self.bin_start(k) for k in range(len(self.values))]

    @property
    def bin_hours(self) -> float:
        return self.sr_freq.total_seconds() / 3600.0

    def total_energy_kwh(self) -> float:
        return float(np.sum(self.values) * self.bin_hours)


@dataclass(frozen=True)
class TemporalSplit:
    """Contiguous train/validation/test blocks on the common bin axis.

    Block sizes follow the configured ratios, rounding the train and validation
    counts down; the test block absorbs the remainder.
    """

    train_end_index: int
    valid_end_index: int
    axis_length: int

    @property
    def train_range(self) -> range:
        return range(0, self.train_end_index)

    @property
    def valid_range(self) -> range:
        return range(self.train_end_index, self.valid_end_index)

    @property
    def test_range(self) -> range:
        return range(self.valid_end_index, self.axis_length)


@dataclass(frozen=True)
class RejectedRow:
    line_no: int
    row: tuple
    reason: str


@dataclass(frozen=True)
class DroppedTransaction:
    transaction: EnergyTransaction
    reason: str


MANDATORY_COLUMNS = ("evse_id", "t_start", "t_end", "energy_kwh")
OPTIONAL_COLUMNS = ("evse_model", "lat", "lon", "nominal_power_kw")


def _to_utc_seconds(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def _parse_timestamp(text: str) -> datetime:
    return _to_utc_seconds(datetime.fromisoformat(text.strip().replace("Z", "+00:00")))


def parse_transactions(
    source: TextIO | Iterable[str],
    schema: Mapping[str, str],
    delimiter: str = ",",
) -> tuple[list[EnergyTransaction], list[RejectedRow]]:
    """Parse a delimited text stream (header row required) into transactions.

    ``schema`` maps transaction field names (``evse_id``, ``t_start``,
    ``t_end``, ``energy_kwh``, and optionally ``evse_model``, ``lat``, ``lon``,
    ``nominal_power_kw``) to column names of the source. Rows whose fields
    cannot be parsed are collected in the rejects list with a reason instead of
    being silently dropped.

    Raises
    ------
    ConfigError
        If a mandatory column named in the schema is absent from the header.
    """
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        return [], []
    header = [h.strip() for h in header]

    col_idx: dict[str, int] = {}
    for fieldname in MANDATORY_COLUMNS:
        column = schema.get(fieldname, fieldname)
        if column not in header:
            raise ConfigError(f"mandatory column {column!r} (field {fieldname!r}) not in header {header}")
        col_idx[fieldname] = header.index(column)
    for fieldname in OPTIONAL_COLUMNS:
        column = schema.get(fieldname, fieldname)
        if column in header:
            col_idx[fieldname] = header.index(column)

    transactions: list[EnergyTransaction] = []
    rejects: list[RejectedRow] = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue

        def cell(fieldname: str) -> str | None:
            idx = col_idx.get(fieldname)
            if idx is None or idx >= len(row):
                return None
            return row[idx].strip()

        reason = None
        try:
            t_start = _parse_timestamp(cell("t_start"))
        except (ValueError, TypeError):
            reason = "unparseable start timestamp"
        if reason is None:
            try:
                t_end = _parse_timestamp(cell("t_end"))
            except (ValueError, TypeError):
                reason = "unparseable end timestamp"
        if reason is None:
            try:
                energy = float(cell("energy_kwh"))
                if math.isnan(energy) or math.isinf(energy):
                    raise ValueError
            except (ValueError, TypeError):
                reason = "non-numeric energy"
            else:
                if energy < 0:
                    reason = "negative energy"
        if reason is None and t_end <= t_start:
            reason = "non-positive duration"

        optional: dict[str, object] = {}
        if reason is None:
            for fieldname, caster in (("lat", float), ("lon", float), ("nominal_power_kw", float)):
                raw = cell(fieldname)
                if raw:
                    try:
                        optional[fieldname] = caster(raw)
                    except ValueError:
                        reason = f"non-numeric {fieldname}"
                        break
            model = cell("evse_model")
            if model:
                optional["evse_model"] = model

        if reason is None:
            try:
                transactions.append(
                    EnergyTransaction(
                        evse_id=cell("evse_id"),
                        t_start=t_start,
                        t_end=t_end,
                        energy_kwh=energy,
                        **optional,
                    )
                )
            except ValueError as exc:
                reason = str(exc)
        if reason is not None:
            rejects.append(RejectedRow(line_no=line_no, row=tuple(row), reason=reason))
    return transactions, rejects


def clean_transactions(
    txs: Sequence[EnergyTransaction],
    max_energy_kwh: float = DEFAULT_MAX_ENERGY_KWH,
    max_duration_h: float = DEFAULT_MAX_DURATION_H,
    min_transactions: int = DEFAULT_MIN_TRANSACTIONS,
) -> tuple[list[EnergyTransaction], list[DroppedTransaction]]:
    """Drop out-of-range transactions and under-observed stations.

    A transaction is dropped when its energy is non-positive, exceeds
    ``max_energy_kwh``, or its duration exceeds ``max_duration_h``. Afterwards
    every EVSE left with fewer than ``min_transactions`` kept transactions is
    dropped entirely. Never raises; every dropped record carries a reason.
    """
    kept: list[EnergyTransaction] = []
    dropped: list[DroppedTransaction] = []
    for tx in txs:
        if tx.energy_kwh <= 0:
            dropped.append(DroppedTransaction(tx, "non-positive energy"))
        elif tx.energy_kwh > max_energy_kwh:
            dropped.append(DroppedTransaction(tx, f"energy > {max_energy_kwh:g} kWh"))
        elif tx.duration_hours > max_duration_h:
            dropped.append(DroppedTransaction(tx, f"duration > {max_duration_h:g} h"))
        else:
            kept.append(tx)

    counts: dict[str, int] = {}
    for tx in kept:
        counts[tx.evse_id] = counts.get(tx.evse_id, 0) + 1
    final: list[EnergyTransaction] = []
    for tx in kept:
        if counts[tx.evse_id] < min_transactions:
            dropped.append(DroppedTransaction(tx, f"EVSE below {min_transactions} transactions"))
        else:
            final.append(tx)
    return final, dropped


def cleaning_report(
    txs: Sequence[EnergyTransaction],
    kept: Sequence[EnergyTransaction],
    dropped: Sequence[DroppedTransaction],
) -> dict:
    """Cleaning statistics as a plain JSON-serializable mapping."""
    by_reason: dict[str, int] = {}
    for item in dropped:
        by_reason[item.reason] = by_reason.get(item.reason, 0) + 1
    per_evse: dict[str, int] = {}
    for tx in kept:
        per_evse[tx.evse_id] = per_evse.get(tx.evse_id, 0) + 1
    return {
        "input_transactions": len(txs),
        "kept_transactions": len(kept),
        "dropped_transactions": len(dropped),
        "dropped_by_reason": dict(sorted(by_reason.items())),
        "kept_per_evse": dict(sorted(per_evse.items())),
    }


@dataclass(frozen=True)
class EvseMeta:
    """Static station attributes pooled from its transactions."""

    evse_id: str
    evse_model: str
    lat: float
    lon: float
    nominal_power_kw: float | None


def evse_metadata(txs: Sequence[EnergyTransaction]) -> dict[str, EvseMeta]:
    """Collect per-station metadata; nominal power is the maximum declared value, if any."""
    meta: dict[str, EvseMeta] = {}
    for tx in txs:
        prev = meta.get(tx.evse_id)
        nominal = tx.nominal_power_kw
        if prev is not None:
            if prev.nominal_power_kw is not None:
                nominal = max(prev.nominal_power_kw, nominal) if nominal else prev.nominal_power_kw
            meta[tx.evse_id] = EvseMeta(tx.evse_id, prev.evse_model, prev.lat, prev.lon, nominal)
        else:
            meta[tx.evse_id] = EvseMeta(tx.evse_id, tx.evse_model, tx.lat, tx.lon, nominal)
    return dict(sorted(meta.items()))


def default_origin(txs: Sequence[EnergyTransaction]) -> datetime:
    """Earliest transaction start, floored to midnight UTC (the common axis origin)."""
    if not txs:
        raise ValueError("no transactions to derive an origin from")
    earliest = min(tx.t_start for tx in txs)
    return earliest.replace(hour=0, minute=0, second=0, microsecond=0)


def resample_demand(
    txs: Sequence[EnergyTransaction],
    origin: datetime | None = None,
    sr_freq: timedelta = DEFAULT_SR_FREQ,
) -> dict[str, DemandSeries]:
    """Aggregate transactions into one demand series per EVSE on a common grid.

    Bin value = sum over transactions of average power times the fraction of
    the bin the transaction overlaps. All series share the same origin and
    length (the common temporal axis), so bin ``k`` refers to the same wall
    clock interval for every EVSE. Session counts and the mean in-bin charging
    duration are accumulated alongside. Transactions are processed in a fixed
    sorted order, so the result is independent of input ordering bit-for-bit.
    """
    if sr_freq <= timedelta(0):
        raise ValueError("sr_freq must be positive")
    if not txs:
        return {}
    if origin is None:
        origin = default_origin(txs)
    origin = _to_utc_seconds(origin)

    width_s = sr_freq.total_seconds()
    origin_s = origin.timestamp()
    last_end_s = max(tx.t_end.timestamp() for tx in txs)
    n_bins = max(0, math.ceil((last_end_s - origin_s) / width_s))

    order = sorted(txs, key=lambda t: (t.t_start, t.t_end, t.energy_kwh, t.evse_id))
    evse_ids = sorted({tx.evse_id for tx in txs})
    out: dict[str, DemandSeries] = {}
    for evse_id in evse_ids:
        out[evse_id] = DemandSeries(
            evse_id=evse_id,
            origin=origin,
            sr_freq=sr_freq,
            values=np.zeros(n_bins),
            sessions_per_bin=np.zeros(n_bins, dtype=np.int64),
            avg_charge_hours_per_bin=np.zeros(n_bins),
        )

    charge_seconds = {evse_id: np.zeros(n_bins) for evse_id in evse_ids}
    for tx in order:
        series = out[tx.evse_id]
        s = max(tx.t_start.timestamp(), origin_s)
        e = min(tx.t_end.timestamp(), origin_s + n_bins * width_s)
        if e <= s:
            continue
        k0 = int((s - origin_s) // width_s)
        k1 = min(int(math.ceil((e - origin_s) / width_s)), n_bins)
        for k in range(k0, k1):
            bin_lo = origin_s + k * width_s
            overlap = min(e, bin_lo + width_s) - max(s, bin_lo)
            if overlap <= 0:
                continue
            series.values[k] += tx.avg_power_kw * (overlap / width_s)
            series.sessions_per_bin[k] += 1
            charge_seconds[tx.evse_id][k] += overlap

    for evse_id, series in out.items():
        busy = series.sessions_per_bin > 0
        series.avg_charge_hours_per_bin[busy] = (
            charge_seconds[evse_id][busy] / 3600.0 / series.sessions_per_bin[busy]
        )
    return out


def split_temporal(axis_length: int, ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)) -> TemporalSplit:
    """Split the common bin axis into contiguous train/validation/test blocks."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive values summing to 1, got {ratios}")
    if axis_length < 10:
        raise ValueError("series too short to split")
    n_train = math.floor(axis_length * ratios[0] + 1e-9)
    n_valid = math.floor(axis_length * ratios[1] + 1e-9)
    return TemporalSplit(
        train_end_index=n_train,
        valid_end_index=n_train + n_valid,
        axis_length=axis_length,
    )


@dataclass(frozen=True)
class SyntheticProfile:
    """Arrival/consumption profile for the synthetic transaction generator.

    Defaults produce intermittent demand with a station-specific daily arrival
    peak, a weekend slowdown, and heavy-tailed (lognormal) session energies.
    """

    idle_prob: float = 0.2
    weekend_idle_prob: float = 0.45
    extra_session_prob: float = 0.3
    peak_hour: float = 8.5
    peak_hour_spread: float = 8.0
    hour_jitter: float = 1.2
    duration_mean_h: float = 3.0
    duration_jitter_h: float = 0.8
    energy_log_mu: float = 2.3
    energy_log_sigma: float = 0.5
    nominal_choices: tuple[float, ...] = (7.4, 11.0, 22.0)
    area_deg: float = 0.25
    start_date: str = "2018-03-01"


def generate_synthetic(
    n_evse: int,
    days: int,
    seed: int,
    profile: SyntheticProfile = SyntheticProfile(),
) -> list[EnergyTransaction]:
    """Generate reproducible synthetic charging transactions for desk-scale runs.

    Each station gets a fixed location, model label, nominal power, and a daily
    arrival peak. Days go idle with a Bernoulli draw (higher on weekends),
    active days hold one session plus an optional extra, session energies are
    lognormal, and sessions never overlap on the same station. Energies and
    durations stay inside the cleaning bounds by construction.
    """
    if n_evse < 1 or days < 1:
        raise ValueError("n_evse and days must both be at least 1")
    rng = np.random.default_rng(seed)
    t0 = datetime.fromisoformat(profile.start_date).replace(tzinfo=timezone.utc)

    txs: list[EnergyTransaction] = []
    for e in range(n_evse):
        evse_id = f"EV{e:03d}"
        nominal = profile.nominal_choices[e % len(profile.nominal_choices)]
        model = f"model-{chr(ord('A') + e % 3)}"
        lat = 40.0 + float(rng.uniform(0, profile.area_deg))
        lon = -3.0 + float(rng.uniform(0, profile.area_deg))
        peak = profile.peak_hour + (e / max(1, n_evse - 1) - 0.5) * profile.peak_hour_spread if n_evse > 1 else profile.peak_hour
        last_end = t0

        for d in range(days):
            weekday = (t0 + timedelta(days=d)).weekday()
            idle_p = profile.weekend_idle_prob if weekday >= 5 else profile.idle_prob
            if rng.random() < idle_p:
                continue
            n_sessions = 1 + int(rng.random() < profile.extra_session_prob)
            for s in range(n_sessions):
                hour = peak + s * 9.0 + float(rng.normal(0, profile.hour_jitter)) if profile.hour_jitter > 0 else peak + s * 9.0
                hour = min(max(hour, 0.0), 23.5)
                start = t0 + timedelta(days=d, seconds=round(hour * 3600))
                if start < last_end:
                    start = last_end + timedelta(minutes=5)
                duration_h = profile.duration_mean_h
                if profile.duration_jitter_h > 0:
                    duration_h += float(rng.normal(0, profile.duration_jitter_h))
                duration_h = min(max(duration_h, 0.5), 8.0)
                end = start + timedelta(seconds=round(duration_h * 3600))
                exact_h = (end - start).total_seconds() / 3600.0
                z = float(rng.normal()) if profile.energy_log_sigma > 0 else 0.0
                energy = math.exp(profile.energy_log_mu + profile.energy_log_sigma * z)
                energy = min(energy, DEFAULT_MAX_ENERGY_KWH, nominal * exact_h)
                energy = max(energy, 0.1)
                txs.append(
                    EnergyTransaction(
                        evse_id=evse_id,
                        t_start=start,
                        t_end=end,
                        energy_kwh=energy,
                        evse_model=model,
                        lat=lat,
                        lon=lon,
                        nominal_power_kw=nominal,
                    )
                )
                last_end = end
    txs.sort(key=lambda t: (t.evse_id, t.t_start))
    return txs


def write_demand_csv(series: DemandSeries, stream: TextIO) -> None:
    """Serialize a demand series as columnar text (one row per bin)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["bin_start", "power_kw", "sessions", "avg_charge_hours"])
    for k in range(len(series)):
        writer.writerow(
            [
                series.bin_start(k).strftime("%Y-%m-%dT%H:%M:%S+00:00"),
                repr(float(series.values[k])),
                int(series.sessions_per_bin[k]),
                repr(float(series.avg_charge_hours_per_bin[k])),
            ]
        )


def write_transactions_csv(txs: Sequence[EnergyTransaction], stream: TextIO) -> None:
    """Serialize transactions with canonical column names.

    The output parses back with an empty schema mapping, since every field
    column carries the field's own name.
    """
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["evse_id", "t_start", "t_end", "energy_kwh", "evse_model",
                     "lat", "lon", "nominal_power_kw"])
    for tx in txs:
        writer.writerow(
            [
                tx.evse_id,
                tx.t_start.strftime("%Y-%m-%dT%H:%M:%S+00:00"),
                tx.t_end.strftime("%Y-%m-%dT%H:%M:%S+00:00"),
                repr(float(tx.energy_kwh)),
                tx.evse_model,
                repr(float(tx.lat)),
                repr(float(tx.lon)),
                "" if tx.nominal_power_kw is None else repr(float(tx.nominal_power_kw)),
            ]
        )
