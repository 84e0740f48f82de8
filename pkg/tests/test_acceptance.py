"""Acceptance gate: nine checks, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see every verdict line
(pytest swallows stdout for passing tests otherwise). Each check recomputes
its expected answer from scratch -- closed-form arithmetic, exhaustive
search, finite differences, or plain-loop re-implementations -- so none of
them shares code with the module under test.
"""

import math
import time
from datetime import datetime, timedelta, timezone

import numpy as np

from chargecast import ingest, metrics
from chargecast.cli import main as cli_main
from chargecast.energy import (
    EmissionFactor,
    EnergyLedger,
    JOULES_PER_KWH,
    co2_overhead_grams,
    log_ratio,
    phase_comparison,
)
from chargecast.federation import FederationPlan, fedxgb_aggregate_ensembles, run_federation
from chargecast.forecasters.gbt import GbtConfig, fit_gbt, fit_tree
from chargecast.forecasters.pinball import pinball_grad, pinball_loss
from chargecast.forecasters.rnn import RnnConfig, RnnModel, RnnTrainer, SequenceData
from chargecast.workbench import ExperimentConfig, run_centralized


def verdict(tag: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}"
    if detail:
        line += f" -- {detail}"
    print(line)
    assert ok, line


# ------------------------------------------------------------------ 1 / 9

def test_binned_demand_conserves_transaction_energy():
    """Binned power times bin width must add back up to the metered kWh.

    1000 random transaction sets, bin widths from 15 minutes to a day
    including one that divides nothing evenly, stations overlapping freely.
    """
    rng = np.random.default_rng(2026)
    base = datetime(2024, 3, 1, tzinfo=timezone.utc)
    widths_h = (0.25, 0.5, 1.0, 3.0, 7.3, 12.0, 24.0)
    worst = 0.0
    t0 = time.perf_counter()
    for case in range(1000):
        txs = []
        for _ in range(int(rng.integers(1, 12))):
            start = base + timedelta(seconds=int(rng.integers(0, 10 * 86400)))
            dur = timedelta(seconds=int(rng.integers(300, 30 * 3600)))
            txs.append(ingest.EnergyTransaction(
                evse_id=f"EV{int(rng.integers(0, 4))}",
                t_start=start,
                t_end=start + dur,
                energy_kwh=float(rng.uniform(0.01, 100.0)),
            ))
        width_h = widths_h[case % len(widths_h)]
        series = ingest.resample_demand(txs, sr_freq=timedelta(hours=width_h))
        binned = sum(float(s.values.sum()) * width_h for s in series.values())
        total = sum(tx.energy_kwh for tx in txs)
        worst = max(worst, abs(binned - total) / total)
    elapsed = time.perf_counter() - t0
    verdict("1/9 binned energy conservation",
            worst <= 1e-6 and elapsed < 10.0,
            f"max relative error {worst:.2e}, 1000 sets in {elapsed:.2f}s")


# ------------------------------------------------------------------ 2 / 9

def test_pinball_loss_values_and_subgradient_match_finite_differences():
    """Three reference losses exactly, then FD on 10,000 off-kink points.

    The loss is piecewise linear, so away from the kink a central difference
    recovers the slope up to rounding; comparisons run on the per-element
    derivative (the mean's 1/n factor multiplied back out).
    """
    cases_ok = (
        pinball_loss([1.0], [1.0], alpha=0.7) == 0.0
        and pinball_loss([1.0], [0.0], alpha=0.7) == max(0.7 * 1.0, (0.7 - 1.0) * 1.0)
        and pinball_loss([0.0], [1.0], alpha=0.7) == max(0.7 * -1.0, (0.7 - 1.0) * -1.0)
        and abs(pinball_loss([1.0], [0.0], alpha=0.7) - 0.7) < 1e-15
        and abs(pinball_loss([0.0], [1.0], alpha=0.7) - 0.3) < 1e-15
    )

    rng = np.random.default_rng(11)
    eps = 1e-6
    margin = 1e-3  # keeps y - yhat clear of the kink on both FD evaluations
    worst_fd = 0.0
    for alpha in (0.7, 0.35):
        n = 5000
        y = rng.normal(size=n)
        gap = rng.uniform(margin, 2.0, size=n) * rng.choice([-1.0, 1.0], size=n)
        yhat = y - gap
        grad = pinball_grad(y, yhat, alpha) * n  # per-element slope
        for i in range(n):
            up = pinball_loss([y[i]], [yhat[i] + eps], alpha=alpha)
            down = pinball_loss([y[i]], [yhat[i] - eps], alpha=alpha)
            fd = (up - down) / (2.0 * eps)
            worst_fd = max(worst_fd, abs(grad[i] - fd))
    verdict("2/9 pinball loss and subgradient",
            cases_ok and worst_fd <= 1e-8,
            f"reference cases {'ok' if cases_ok else 'WRONG'}, "
            f"max |analytic - FD| {worst_fd:.2e} over 10000 points")


# ------------------------------------------------------------------ 3 / 9

TOY_RNN = dict(hidden_size=5, step_input=4, n_locations=3, n_models=2,
               loc_emb_dim=4, model_emb_dim=2, dense_size=6, seq_len=7)


def _toy_batch(model: RnnModel, seed: int = 0, n: int = 6, margin: float = 1e-3):
    c = model.config
    rng = np.random.default_rng(seed)
    batch = SequenceData(
        X=rng.normal(size=(n, c.seq_len, c.step_input)),
        loc=rng.integers(0, c.n_locations, n),
        model=rng.integers(0, c.n_models, n),
        nominal=rng.random(n),
        y=rng.random(n) * 2.0,
    )
    params = model.init_params(seed)
    yhat, _ = model.forward(params, batch)
    assert np.min(np.abs(batch.y - yhat)) > margin
    return params, batch


def test_rnn_analytic_gradients_match_finite_differences():
    """Every parameter of every cell/direction variant against central FD."""
    eps = 1e-6
    results = {}
    for cell in ("gru", "lstm"):
        for bidirectional in (False, True):
            model = RnnModel(RnnConfig(cell=cell, bidirectional=bidirectional,
                                       dropout=0.13, **TOY_RNN))
            params, batch = _toy_batch(model)
            _, grad = model.loss_and_grad(params, batch)  # eval mode, dropout off
            worst = 0.0
            for i in range(len(params)):
                p = params.copy()
                p[i] += eps
                up, _ = model.loss_and_grad(p, batch)
                p[i] -= 2 * eps
                down, _ = model.loss_and_grad(p, batch)
                fd = (up - down) / (2 * eps)
                # relative error with a unit floor; FD noise dominates tiny coordinates
                worst = max(worst, abs(grad[i] - fd) / max(1.0, abs(fd)))
            results[f"{cell}{'-bi' if bidirectional else ''}"] = worst
    worst_overall = max(results.values())
    verdict("3/9 recurrent-net gradient check",
            worst_overall <= 1e-4,
            ", ".join(f"{k} {v:.1e}" for k, v in results.items()))


# ------------------------------------------------------------------ 4 / 9

def _exhaustive_stump(X, y):
    """Try every (feature, threshold) with plain masked sums.

    Returns (feature, threshold, left_mean, right_mean) or None when no
    split strictly improves the squared-error score.
    """
    n = len(y)
    total = float(np.sum(y))
    parent = total * total / n
    best = None
    for j in range(X.shape[1]):
        for thr in np.unique(X[:, j]):
            mask = X[:, j] <= thr
            n_l = int(np.sum(mask))
            if n_l == 0 or n_l == n:
                continue
            s_l = float(np.sum(y[mask]))
            s_r = float(np.sum(y[~mask]))
            gain = s_l * s_l / n_l + s_r * s_r / (n - n_l) - parent
            if gain > 0 and (best is None or gain > best[0]):
                best = (gain, j, float(thr))
    if best is None:
        return None
    _, j, thr = best
    mask = X[:, j] <= thr
    return j, thr, float(np.mean(y[mask])), float(np.mean(y[~mask]))


def test_depth_one_tree_matches_exhaustive_split_search():
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.random((8, 3))
        if seed % 3 == 0:
            X[:, 1] = np.round(X[:, 1] * 4) / 4  # force duplicates and ties
        y = rng.random(8)
        tree = fit_tree(X, y, max_depth=1)
        oracle = _exhaustive_stump(X, y)
        if oracle is None:
            agree = tree.feature[0] == -1
        else:
            j, thr, vl, vr = oracle
            agree = (int(tree.feature[0]) == j and tree.threshold[0] == thr
                     and tree.value[1] == vl and tree.value[2] == vr)
        mismatches += not agree
    verdict("4/9 depth-1 tree vs exhaustive split search",
            mismatches == 0,
            f"{mismatches} of 100 random 8-row datasets disagree")


# ------------------------------------------------------------------ 5 / 9

def _toy_trainer(seed: int, data_seed: int) -> RnnTrainer:
    config = RnnConfig(cell="gru", hidden_size=4, step_input=3, n_locations=3,
                       n_models=2, loc_emb_dim=3, model_emb_dim=2, dense_size=4,
                       dropout=0.13, seq_len=5)
    model = RnnModel(config)
    rng = np.random.default_rng(data_seed)

    def block(n):
        return SequenceData(
            X=rng.normal(size=(n, config.seq_len, config.step_input)),
            loc=rng.integers(0, config.n_locations, size=n),
            model=rng.integers(0, config.n_models, size=n),
            nominal=rng.uniform(0.3, 1.0, size=n),
            y=rng.uniform(0.0, 1.0, size=n),
        )

    return RnnTrainer(model, block(40), block(16), seed=seed)


def test_federation_equivalences_and_pooled_ensemble_sizes():
    # (a) one client, no aggregation partners: identical to training straight
    # through the same number of epochs
    fed = _toy_trainer(seed=9, data_seed=7)
    solo = _toy_trainer(seed=9, data_seed=7)
    plan = FederationPlan(rounds=3, local_epochs=2, local_patience=None, seed=0)
    result = run_federation(plan, {0: fed})
    solo.train_epochs(3 * 2)
    delta = float(np.max(np.abs(result.params - solo.get_params())))
    single_ok = delta <= 1e-10

    # (b) the proximal penalty at mu=0 must change nothing, bit for bit
    plan_avg = FederationPlan(rounds=2, local_epochs=2, local_patience=None,
                              strategy="fedavg", seed=4)
    plan_prox = FederationPlan(rounds=2, local_epochs=2, local_patience=None,
                               strategy="fedprox", mu=0.0, seed=4)
    res_avg = run_federation(plan_avg,
                             {h: _toy_trainer(seed=h, data_seed=20 + h) for h in range(3)})
    res_prox = run_federation(plan_prox,
                              {h: _toy_trainer(seed=h, data_seed=20 + h) for h in range(3)})
    prox_ok = bool(np.array_equal(res_avg.params, res_prox.params))

    # (c) pooled ensemble sizes: clients times trees-per-client, nothing lost
    gbt_cfg = GbtConfig(n_trees=37, max_depth=2)
    rng = np.random.default_rng(3)

    def client_model():
        X = rng.random((40, 3))
        y = rng.random(40)
        return fit_gbt(X, y, gbt_cfg)

    pooled_8 = fedxgb_aggregate_ensembles({h: client_model() for h in range(8)})
    pooled_4 = fedxgb_aggregate_ensembles({h: client_model() for h in range(4)})
    sizes_ok = pooled_8.n_trees == 296 and pooled_4.n_trees == 148

    verdict("5/9 federation equivalences",
            single_ok and prox_ok and sizes_ok,
            f"single-client max delta {delta:.1e}, prox(mu=0)==avg {prox_ok}, "
            f"pooled sizes {pooled_8.n_trees}/{pooled_4.n_trees} want 296/148")


# ------------------------------------------------------------------ 6 / 9

def _loop_metrics(y, yhat, train, season):
    """Plain-Python re-implementation of all seven metrics."""
    n = len(y)
    abs_err = [abs(a - b) for a, b in zip(y, yhat)]
    out = {}
    out["mae"] = sum(abs_err) / n
    out["rmse"] = math.sqrt(sum(e * e for e in abs_err) / n)
    denom = sum(abs(v) for v in y)
    out["wape"] = sum(abs_err) / denom if denom > 0 else math.nan
    mean_y = sum(y) / n
    ss_tot = sum((v - mean_y) ** 2 for v in y)
    out["r2"] = 1 - sum(e * e for e in abs_err) / ss_tot if ss_tot > 0 else math.nan
    terms = []
    for a, b in zip(y, yhat):
        s = abs(a) + abs(b)
        terms.append(200.0 * abs(a - b) / s if s > 0 else 0.0)
    out["smape"] = sum(terms) / n
    terms = []
    for a, b in zip(y, yhat):
        if a == 0:
            terms.append(0.0 if b == 0 else math.pi / 2)
        else:
            terms.append(math.atan(abs(a - b) / abs(a)))
    out["maape"] = sum(terms) / n
    diffs = [abs(train[k] - train[k - season]) for k in range(season, len(train))]
    scale = sum(diffs) / len(diffs)
    out["mase"] = (sum(abs_err) / n) / scale if scale > 0 else math.nan
    return out


def test_metric_suite_matches_loop_oracles_and_bounds():
    rng = np.random.default_rng(42)

    # seven metrics vs plain loops, mixed lengths and sprinkled exact zeros
    worst = 0.0
    nan_disagreements = 0
    for case in range(200):
        n = int(rng.integers(1, 41))
        season = (1, 5, 24)[case % 3]
        y = np.abs(rng.normal(scale=5.0, size=n))
        yhat = np.abs(rng.normal(scale=5.0, size=n))
        y[rng.random(n) < 0.15] = 0.0
        yhat[rng.random(n) < 0.15] = 0.0
        train = np.abs(rng.normal(scale=5.0, size=int(rng.integers(season + 1, 80 + season))))
        got = metrics.evaluate_forecast(y, yhat, train, season=season)
        want = _loop_metrics(list(y), list(yhat), list(train), season)
        for name in metrics.METRIC_NAMES:
            if math.isnan(want[name]) or math.isnan(got[name]):
                nan_disagreements += math.isnan(want[name]) != math.isnan(got[name])
            else:
                worst = max(worst, abs(got[name] - want[name]))
    oracle_ok = worst <= 1e-12 and nan_disagreements == 0

    # scaling both series and the training history by c > 0 leaves the five
    # relative metrics alone and stretches mae/rmse by exactly c
    scale_ok = True
    for c in (0.5, 3.7, 100.0):
        y = rng.uniform(0.1, 10.0, size=30)
        yhat = rng.uniform(0.1, 10.0, size=30)
        train = rng.uniform(0.1, 10.0, size=60)
        base = metrics.evaluate_forecast(y, yhat, train, season=5)
        scaled = metrics.evaluate_forecast(c * y, c * yhat, c * train, season=5)
        for name in ("mase", "smape", "maape", "wape", "r2"):
            scale_ok &= abs(scaled[name] - base[name]) <= 1e-9 * max(1.0, abs(base[name]))
        for name in ("mae", "rmse"):
            scale_ok &= abs(scaled[name] - c * base[name]) <= 1e-9 * c * base[name]

    # bound sweep: 100,000 random non-negative vectors with plenty of zeros
    n_vectors = 100_000
    lens = rng.integers(1, 5, size=n_vectors)
    offsets = np.concatenate([[0], np.cumsum(lens)])
    pool_a = np.abs(rng.normal(scale=3.0, size=int(offsets[-1])))
    pool_b = np.abs(rng.normal(scale=3.0, size=int(offsets[-1])))
    pool_a[rng.random(len(pool_a)) < 0.25] = 0.0
    pool_b[rng.random(len(pool_b)) < 0.25] = 0.0
    smape_lo, smape_hi = math.inf, -math.inf
    maape_lo, maape_hi = math.inf, -math.inf
    for i in range(n_vectors):
        a = pool_a[offsets[i]:offsets[i + 1]]
        b = pool_b[offsets[i]:offsets[i + 1]]
        s = metrics.smape(a, b)
        m = metrics.maape(a, b)
        smape_lo, smape_hi = min(smape_lo, s), max(smape_hi, s)
        maape_lo, maape_hi = min(maape_lo, m), max(maape_hi, m)
    bounds_ok = (0.0 <= smape_lo and smape_hi <= 200.0
                 and 0.0 <= maape_lo and maape_hi <= math.pi / 2)

    verdict("6/9 metric oracles, scaling, bounds",
            oracle_ok and scale_ok and bounds_ok,
            f"max |metric - loop oracle| {worst:.1e}, scaling {scale_ok}, "
            f"smape in [{smape_lo:.1f}, {smape_hi:.1f}], "
            f"maape in [{maape_lo:.3f}, {maape_hi:.3f}]")


# ------------------------------------------------------------------ 7 / 9

def test_boosted_trees_learn_synthetic_demand_at_desk_scale():
    """Planted daily/weekly structure must be recoverable by the tree model.

    Median MASE across stations under 1.0 (better than repeating yesterday)
    and under the linear autoregressive baseline's median.
    """
    t0 = time.perf_counter()
    cfg = ExperimentConfig(synthetic_evse=8, synthetic_days=120, seed=7,
                           roster=("seasonal-naive", "arx", "gbt"))
    result = run_centralized(cfg)
    blocks = result.report["models"]
    gbt_med = blocks["gbt"]["quantiles"]["mase"]["q50"]
    arx_med = blocks["arx"]["quantiles"]["mase"]["q50"]
    naive_med = blocks["seasonal-naive"]["quantiles"]["mase"]["q50"]
    elapsed = time.perf_counter() - t0
    verdict("7/9 desk-scale learnability",
            gbt_med < 1.0 and gbt_med < arx_med and elapsed < 120.0,
            f"median MASE gbt {gbt_med:.3f} vs arx {arx_med:.3f} "
            f"(naive {naive_med:.3f}), {elapsed:.1f}s")


# ------------------------------------------------------------------ 8 / 9

def test_emission_arithmetic_reference_figures():
    """Closed-form CO2 figures for a heavy vs light federated schedule.

    At 0.289 kg/kWh grid intensity, 1.23e-3 kWh per run costs 0.355 g CO2e
    and 0.39e-3 kWh costs 0.113 g; dropping from the former to the latter
    saves 68.3%. Equal energy totals must give a log-ratio of exactly zero.
    """
    ef = EmissionFactor(kg_per_kwh=0.289, vintage="EU grid 2018")
    heavy_g = co2_overhead_grams(1.23e-3, ef)
    light_g = co2_overhead_grams(0.39e-3, ef)

    # the savings figure has to come out of the package's own phase report
    ledger = EnergyLedger()
    ledger.record("centralized", "server", 0, 1, 1.0, model="gbt")
    ledger.record("fed-heavy", "hub0", 0, 1, 1.23e-3 * JOULES_PER_KWH, model="gbt")
    ledger.record("fed-light", "hub0", 0, 1, 0.39e-3 * JOULES_PER_KWH, model="gbt")
    row = phase_comparison(ledger, ef)["models"]["gbt"]
    savings = row["light_vs_heavy_savings_pct"]

    zero_ok = log_ratio(7.7, 7.7) == 0.0
    verdict("8/9 emission arithmetic",
            (abs(heavy_g - 0.355) <= 0.01 and abs(light_g - 0.113) <= 0.01
             and abs(savings - 68.3) <= 0.5 and zero_ok),
            f"heavy {heavy_g:.3f}g, light {light_g:.3f}g, savings {savings:.2f}%, "
            f"log-ratio(x, x) == 0 {zero_ok}")


# ------------------------------------------------------------------ 9 / 9

def test_repeated_cli_run_produces_byte_identical_manifest(tmp_path):
    args = ["train", "--evse", "4", "--days", "80", "--seed", "5",
            "--model", "seasonal-naive", "--model", "gbt", "--quiet"]
    rc_a = cli_main(args + ["--out", str(tmp_path / "a")])
    rc_b = cli_main(args + ["--out", str(tmp_path / "b")])
    manifest_a = (tmp_path / "a" / "manifest.json").read_bytes()
    manifest_b = (tmp_path / "b" / "manifest.json").read_bytes()
    verdict("9/9 manifest reproducibility",
            rc_a == 0 and rc_b == 0 and manifest_a == manifest_b,
            f"exit codes {rc_a}/{rc_b}, manifests "
            f"{'identical' if manifest_a == manifest_b else 'DIFFER'} "
            f"({len(manifest_a)} bytes)")
