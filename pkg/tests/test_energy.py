import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chargecast import energy


def test_op_count_meter_reference():
    meter = energy.OpCountMeter(j_per_op=1e-9)
    assert meter.joules(1e6) == pytest.approx(1e-3)
    assert meter.joules(0) == 0.0
    with pytest.raises(ValueError):
        meter.joules(-1)
    with pytest.raises(ValueError):
        energy.OpCountMeter(j_per_op=0.0)


def test_wall_clock_meter_with_fake_clock():
    ticks = iter([10.0, 12.0])
    meter = energy.WallClockMeter(watts=50.0, clock=lambda: next(ticks))
    with meter:
        pass
    assert meter.elapsed_s == pytest.approx(2.0)
    assert meter.joules == pytest.approx(100.0)


def test_ledger_records_and_validates():
    ledger = energy.EnergyLedger()
    entry = ledger.record("centralized", "server", 0, 1, 0.5, model="gbt")
    assert entry.joules == 0.5
    with pytest.raises(ValueError):
        ledger.record("warmup", "server", 0, 0, 1.0)
    with pytest.raises(ValueError):
        ledger.record("centralized", "server", 0, 0, -1.0)
    with pytest.raises(ValueError):
        ledger.record("centralized", "server", 0, 0, math.inf)


def test_ledger_totals_filter_by_phase_model_scope():
    ledger = energy.EnergyLedger()
    ledger.record("fed-heavy", "hub0", 0, 0, 1.0, model="rnn")
    ledger.record("fed-heavy", "hub1", 0, 0, 2.0, model="rnn")
    ledger.record("fed-light", "hub0", 0, 0, 4.0, model="rnn")
    ledger.record("fed-heavy", "hub0", 0, 0, 8.0, model="gbt")
    assert ledger.total_joules() == pytest.approx(15.0)
    assert ledger.total_joules(phase="fed-heavy", model="rnn") == pytest.approx(3.0)
    assert ledger.total_joules(scope="hub0") == pytest.approx(13.0)


@given(st.lists(st.floats(min_value=0.0, max_value=1e3), min_size=1, max_size=40),
       st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_ledger_total_is_permutation_invariant(joules, seed):
    rng = np.random.default_rng(seed)
    a = energy.EnergyLedger()
    b = energy.EnergyLedger()
    rows = [("fed-heavy", f"hub{i % 3}", i % 5, i % 2, j) for i, j in enumerate(joules)]
    for row in rows:
        a.record(*row)
    for i in rng.permutation(len(rows)):
        b.record(*rows[i])
    assert a.total_joules() == b.total_joules()  # bit-for-bit


def test_client_round_averages():
    ledger = energy.EnergyLedger()
    for rnd in range(4):
        ledger.record("fed-heavy", "hub0", rnd, 0, 2.0, model="rnn")
        ledger.record("fed-heavy", "server", rnd, 0, 99.0, model="rnn")
    avg = ledger.client_round_averages("fed-heavy", "rnn")
    assert avg == {"hub0": pytest.approx(2.0)}


def test_log_ratio_reference_points():
    assert energy.log_ratio(1.0, 1.0) == 0.0
    assert energy.log_ratio(100.0, 1.0) == pytest.approx(2.0)
    assert energy.log_ratio(200.0, 1.0) > energy.log_ratio(100.0, 1.0)
    with pytest.raises(ValueError):
        energy.log_ratio(0.0, 1.0)
    with pytest.raises(ValueError):
        energy.log_ratio(1.0, -2.0)


def test_co2_overhead_matches_published_figures():
    # 1.23e-3 kWh of federated overhead at 0.289 kg/kWh is 0.355 g
    heavy = energy.co2_overhead_grams(1.23e-3)
    light = energy.co2_overhead_grams(0.39e-3)
    assert heavy == pytest.approx(0.355, abs=0.005)
    assert round(heavy, 2) == 0.36 or round(heavy, 2) == 0.35
    assert light == pytest.approx(0.113, abs=0.005)
    assert energy.co2_overhead_grams(0.0) == 0.0
    with pytest.raises(ValueError):
        energy.co2_overhead_grams(-1.0)


def test_co2_overhead_is_linear():
    ef = energy.EmissionFactor(0.5)
    assert energy.co2_overhead_grams(2.0, ef) == pytest.approx(2 * energy.co2_overhead_grams(1.0, ef))
    ef2 = energy.EmissionFactor(1.0)
    assert energy.co2_overhead_grams(1.0, ef2) == pytest.approx(2 * energy.co2_overhead_grams(1.0, ef))


def test_emission_factor_must_be_positive():
    with pytest.raises(ValueError):
        energy.EmissionFactor(0.0)


def make_three_phase_ledger(heavy_epochs=5, light_epochs=1):
    ledger = energy.EnergyLedger()
    meter = energy.OpCountMeter(1e-9)
    per_epoch_ops = 1e6
    ledger.record("centralized", "server", 0, 0, meter.joules(10 * per_epoch_ops), model="rnn")
    for rnd in range(10):
        for hub in ("hub0", "hub1"):
            ledger.record("fed-heavy", hub, rnd, heavy_epochs,
                          meter.joules(heavy_epochs * per_epoch_ops), model="rnn")
            ledger.record("fed-light", hub, rnd, light_epochs,
                          meter.joules(light_epochs * per_epoch_ops), model="rnn")
    return ledger


def test_phase_comparison_light_cheaper_than_heavy():
    report = energy.phase_comparison(make_three_phase_ledger())
    row = report["models"]["rnn"]
    assert row["fed_light_j"] < row["fed_heavy_j"]
    # identical workloads: totals differ exactly by the epoch-count factor
    assert row["fed_heavy_j"] == pytest.approx(5 * row["fed_light_j"])
    assert row["light_vs_heavy_savings_pct"] == pytest.approx(80.0)
    assert row["log_ratio_heavy"] > row["log_ratio_light"]


def test_phase_comparison_identical_ledgers_give_zero_savings():
    report = energy.phase_comparison(make_three_phase_ledger(heavy_epochs=2, light_epochs=2))
    row = report["models"]["rnn"]
    assert row["light_vs_heavy_savings_pct"] == pytest.approx(0.0)
    assert row["fed_heavy_j"] == row["fed_light_j"]


def test_phase_comparison_published_savings_figure():
    # heavy 1.23e-3 kWh vs light 0.39e-3 kWh: savings within 0.5 pp of 68.21%
    ledger = energy.EnergyLedger()
    ledger.record("centralized", "server", 0, 0, 1.0e-4 * energy.JOULES_PER_KWH, model="rnn")
    ledger.record("fed-heavy", "hub0", 0, 0, 1.23e-3 * energy.JOULES_PER_KWH, model="rnn")
    ledger.record("fed-light", "hub0", 0, 0, 0.39e-3 * energy.JOULES_PER_KWH, model="rnn")
    row = energy.phase_comparison(ledger)["models"]["rnn"]
    assert row["light_vs_heavy_savings_pct"] == pytest.approx(68.21, abs=0.5)
    assert row["co2_overhead_g_heavy"] == pytest.approx((1.23e-3 - 1.0e-4) * 0.289 * 1000, rel=1e-9)


def test_phase_comparison_clamps_negative_overhead():
    ledger = energy.EnergyLedger()
    ledger.record("centralized", "server", 0, 0, 100.0, model="gbt")
    ledger.record("fed-heavy", "hub0", 0, 0, 10.0, model="gbt")
    row = energy.phase_comparison(ledger)["models"]["gbt"]
    assert row["co2_overhead_g_heavy"] == 0.0
    assert row["overhead_kwh_heavy"] < 0.0
    assert row["log_ratio_heavy"] < 0.0


def test_ledger_csv_export():
    ledger = energy.EnergyLedger()
    ledger.record("centralized", "server", 0, 3, 0.125, model="gbt")
    buf = io.StringIO()
    energy.write_ledger_csv(ledger, buf)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "phase,model,scope,round,epoch,joules"
    assert lines[1] == "centralized,gbt,server,0,3,0.125"
