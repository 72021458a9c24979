"""Acceptance gate: one PASS/FAIL line per criterion.

Run on its own with ``pytest tests/test_acceptance.py -s`` (or ``python
tests/test_acceptance.py``). The lines are also repeated in the terminal
summary of any pytest run that includes this module.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from mmdes.cli import main as cli_main
from mmdes.cross_attention import forward, gradient_check, init_params
from mmdes.data_model import Modality
from mmdes.dynamic_selection import (
    CompetenceRegion,
    NeighborIndex,
    combine,
    competence_region,
    dw_combine,
    dws_filter,
    mean_combine,
    neighbor_weights,
    regressor_weights,
)
from mmdes.harness import EvaluationReport, ExperimentConfig, XATTN, run_experiment, sensitivity_summary
from mmdes.metrics import ccc
from mmdes.regressor_pool import error_table

RESULTS = []
BENCH_BUDGET_S = 600.0


def record(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def benchmark():
    """Default synthetic benchmark: 18 persons x 1500 frames, 10 repetitions, seed 42."""
    config = ExperimentConfig()
    syn = config.source["synthetic"]
    assert syn == {} and config.repetitions == 10 and config.seed == 42
    t0 = time.perf_counter()
    report = run_experiment(config)
    return report, time.perf_counter() - t0


def test_1_ccc_oracle():
    a = ccc([1, 2, 3], [1, 2, 3])
    b = ccc([1, 2, 3], [3, 2, 1])
    c = ccc([1, 2, 3], [2, 3, 4])
    ok = a == 1.0 and abs(b + 1.0) <= 1e-12 and abs(c - 4 / 7) <= 1e-12
    record("1 CCC oracle", ok, f"identity={a!r} reversed={b!r} shifted={c!r} (4/7={4 / 7!r})")


def test_2_weight_oracles():
    d = neighbor_weights([1, 3])
    region = CompetenceRegion(np.arange(2), np.ones(2), np.array([[1.0, 3.0], [1.0, 3.0]]))
    alpha = regressor_weights(region).alpha
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        k, n = rng.integers(1, 30), rng.integers(1, 8)
        dist = np.sort(rng.uniform(0, 5, k))
        err = rng.uniform(0.01, 2.0, (k, n))
        base = regressor_weights(CompetenceRegion(np.arange(k), dist, err)).alpha
        for c in (1e-6, 1.0, 1e6):
            scaled = regressor_weights(CompetenceRegion(np.arange(k), dist, err * c)).alpha
            worst = max(worst, float(np.max(np.abs(scaled - base))))
    ok = (np.max(np.abs(d - [0.75, 0.25])) <= 1e-12 and np.max(np.abs(alpha - [0.75, 0.25])) <= 1e-12
          and worst <= 1e-9)
    record("2 neighbor/regressor weight oracles", ok,
           f"d={d.tolist()} alpha={alpha.tolist()} max scale-invariance deviation={worst:.2e}")


def test_3_degeneracy_suite():
    rng = np.random.default_rng(3)
    frames, k, n = 1000, 20, 5
    dist = np.sort(rng.uniform(0, 3, (frames, k)), axis=-1)
    err = rng.uniform(0, 2, (frames, k, n))
    preds = rng.normal(size=(frames, n))
    region = CompetenceRegion(np.zeros((frames, k), dtype=int), dist, err)
    dw = dw_combine(preds, regressor_weights(region))
    dws_inf = dw_combine(preds, dws_filter(region, math.inf))
    dev_dws = float(np.max(np.abs(dws_inf - dw)))
    single = CompetenceRegion(region.neighbor_indices, dist, err[..., :1])
    ds_single, _ = combine("DS", preds[:, :1], single)
    ds_exact = bool(np.array_equal(ds_single, preds[:, 0]))
    uniform = dw_combine(preds, np.full((frames, n), 1.0 / n))
    dev_mean = float(np.max(np.abs(uniform - mean_combine(preds))))
    ok = dev_dws <= 1e-12 and ds_exact and dev_mean <= 1e-12
    record("3 degeneracy suite", ok,
           f"|DWS(inf)-DW|={dev_dws:.1e} DS singleton exact={ds_exact} |uniform DW-Mean|={dev_mean:.1e} "
           f"over {frames} frames")


def test_4_knn_oracle():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 8))
    X[17] = X[42]
    table = error_table(rng.normal(size=(200, 5)), rng.normal(size=200), X)
    Q = np.vstack([rng.normal(size=(98, 8)), X[42], X[0] + 1e-12])
    region = competence_region(NeighborIndex(X), table, Q, k=100)
    mismatches = 0
    for j, q in enumerate(Q):
        dist = np.sqrt(((X - q) ** 2).sum(axis=1))
        order = np.array(sorted(range(200), key=lambda i: (dist[i], i))[:100])
        if not (np.array_equal(region.neighbor_indices[j], order)
                and np.array_equal(region.distances[j], dist[order])
                and np.array_equal(region.error_rows[j], table.errors[order])):
            mismatches += 1
    record("4 kNN vs exhaustive oracle", mismatches == 0, f"{mismatches} mismatching queries out of {len(Q)}")


def test_5_gradient_check():
    t0 = time.perf_counter()
    worst = max(max(gradient_check(4, 3, 5, seed=s).values()) for s in range(10))
    rng = np.random.default_rng(5)
    X_a, X_v = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    p = init_params(4, 3, 5, seed=5).replace(W_ha=np.zeros((4, 4)), W_hv=np.zeros((3, 3)))
    _, cache = forward(p, X_a, X_v)
    residual = bool(np.array_equal(cache["X_att"], np.vstack([X_a, X_v])))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and residual and elapsed < 60
    record("5 cross-attention gradient check", ok,
           f"max rel. error over 10 seeds={worst:.2e} residual identity exact={residual} ({elapsed:.1f}s)")


@pytest.mark.slow
def test_6a_modality_asymmetry(benchmark):
    report, _ = benchmark
    mods = report.pool_modalities
    audio = [n for n, m in mods.items() if m == Modality.AUDIO.value]
    video = [n for n, m in mods.items() if m == Modality.VIDEO.value]
    hits = 0
    for r in range(report.repetitions):
        def mean_ccc(target, names):
            return np.mean([report.pool[(target, n)][r] for n in names])
        if mean_ccc("arousal", audio) > mean_ccc("arousal", video) and \
                mean_ccc("valence", video) > mean_ccc("valence", audio):
            hits += 1
    record("6a modality asymmetry", hits >= 9, f"holds in {hits}/{report.repetitions} repetitions (need >= 9)")


@pytest.mark.slow
def test_6b_missing_modality_robustness(benchmark):
    report, _ = benchmark
    checks = []
    for scen in ("zero:audio", "mean:audio"):
        checks.append(("arousal", scen, "DS"))
    for scen in ("zero:video", "mean:video"):
        checks.extend([("valence", scen, "DS"), ("valence", scen, "DWS")])
    parts, ok = [], True
    for t, s, m in checks:
        mine, base = report.mean(t, s, m), report.mean(t, s, "Mean")
        ok &= mine > base
        parts.append(f"{t}/{s} {m} {mine:.3f} vs Mean {base:.3f}")
    record("6b missing-modality robustness", ok, "; ".join(parts))


@pytest.mark.slow
def test_6c_informative_modality_dominance(benchmark):
    report, _ = benchmark
    failures = []
    for m in report.methods:
        for kind in ("zero", "mean"):
            without_audio = report.mean("arousal", f"{kind}:audio", m)
            without_video = report.mean("arousal", f"{kind}:video", m)
            if not without_audio < without_video:
                failures.append(f"{m}/{kind} ({without_audio:.3f} vs {without_video:.3f})")
    detail = (f"arousal drops more without audio for all {len(report.methods)} methods, both imputations"
              if not failures else "violations: " + ", ".join(failures))
    record("6c informative-modality dominance", not failures, detail)


@pytest.mark.slow
def test_6_runtime(benchmark):
    report, elapsed = benchmark
    assert XATTN in report.methods
    record("6 benchmark runtime", elapsed < BENCH_BUDGET_S,
           f"{elapsed:.0f}s for {report.repetitions} repetitions (budget {BENCH_BUDGET_S:.0f}s)")


def test_7_determinism(tmp_path, capsys):
    cfg = {
        "source": {"synthetic": {"persons": 10, "frames": 400}},
        "repetitions": 2,
        "meta_window_len": 100,
        "cross_attention": {"epochs": 20},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    codes = [cli_main(["run", "--config", str(path), "--out", str(tmp_path / "a"), "--format", "json"]),
             cli_main(["run", "--config", str(path), "--out", str(tmp_path / "b"), "--format", "json",
                       "--jobs", "2"])]
    capsys.readouterr()
    a, b = (tmp_path / d / "report.json" for d in "ab")
    same = codes == [0, 0] and a.read_bytes() == b.read_bytes()
    record("7 determinism", same, f"exit codes {codes}; report.json byte-identical={same} (serial vs 2 jobs)")


def test_8_sensitivity_arithmetic():
    values = {
        ("arousal", "none", "Mean"): [0.72], ("arousal", "zero:audio", "Mean"): [0.61],
        ("arousal", "none", "DS"): [0.67], ("arousal", "zero:audio", "DS"): [0.43],
    }
    report = EvaluationReport({}, ["arousal"], ["none", "zero:audio"], ["Mean", "DS"], values)
    s = sensitivity_summary(report)
    a, b = s[("arousal", "zero:audio", "Mean")], s[("arousal", "zero:audio", "DS")]
    ok = abs(a + 15.28) <= 0.01 and abs(b + 35.82) <= 0.01
    record("8 sensitivity arithmetic", ok, f"0.72->0.61 gives {a:.4f}%, 0.67->0.43 gives {b:.4f}%")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
