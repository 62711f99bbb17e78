import csv
import math
import statistics

import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from reinit_harness import bench
from reinit_harness.bench import (CSV_HEADER, ConfigError, ExperimentConfig, InsufficientSamples,
                                  TimingBreakdown, ci95, csv_rows, emit_csv)
from reinit_harness.core import ProcessState


def test_ci95_worked_examples():
    assert ci95([3.0] * 10) == (3.0, 0.0)
    m, h = ci95([float(x) for x in range(1, 11)])
    assert m == 5.5
    assert math.isclose(h, 2.262 * 3.02765 / math.sqrt(10), rel_tol=1e-3)
    assert math.isclose(h, 2.166, rel_tol=1e-3)
    assert ci95([0.0, 2.0]) == (1.0, pytest.approx(12.706, rel=1e-9))


def test_ci95_needs_two_samples():
    with pytest.raises(InsufficientSamples):
        ci95([1.0])
    with pytest.raises(InsufficientSamples):
        ci95([])


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1000, allow_nan=False), min_size=2, max_size=31))
def test_ci95_against_scipy(xs):
    m, h = ci95(xs)
    n = len(xs)
    want = scipy.stats.t.ppf(0.975, n - 1) * statistics.stdev(xs) / math.sqrt(n)
    assert math.isclose(m, statistics.fmean(xs), rel_tol=1e-12, abs_tol=1e-12)
    assert math.isclose(h, want, rel_tol=1e-3, abs_tol=1e-9)


def test_ci95_clamps_large_samples_to_df30():
    xs = [float(i % 7) for i in range(100)]
    _, h = ci95(xs)
    assert math.isclose(h, 2.042 * statistics.stdev(xs) / 10, rel_tol=1e-12)


def test_t_table_against_scipy():
    for df, t in enumerate(bench.T975, start=1):
        assert math.isclose(t, scipy.stats.t.ppf(0.975, df), rel_tol=1e-3)


@pytest.mark.parametrize("kw", [
    dict(strategy="cr", ckpt_mode="buddy"),
    dict(inject="node", ckpt_mode="buddy"),
    dict(world_size=1, ckpt_mode="buddy"),
    dict(inject="proc", ckpt_mode="none"),
    dict(strategy="reinit", inject="node", ckpt_mode="file", num_daemons=1, spares=0),
    dict(iterations=0),
])
def test_table_rules_reject(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


@pytest.mark.parametrize("kw", [
    dict(strategy="reinit", ckpt_mode="buddy", inject="proc"),
    dict(strategy="reinit", ckpt_mode="file", inject="node", num_daemons=2),
    dict(strategy="ulfm", ckpt_mode="buddy", inject="proc"),
    dict(strategy="cr", ckpt_mode="file", inject="proc"),
    dict(strategy="cr", ckpt_mode="file", inject="node"),
])
def test_table_rules_accept(kw):
    ExperimentConfig(**kw)


def outcome(strategy, n, rep, t=0.25 + 2 ** -20):
    cfg = ExperimentConfig(strategy=strategy, ckpt_mode="file", world_size=n)
    return bench.RunOutcome(cfg, rep, TimingBreakdown(t, t, t, t, 5 * t), 0, 0.0, {0: [ProcessState.NEW]})


def test_csv_format_and_order(tmp_path):
    outs = [outcome("reinit", 8, 1), outcome("cr", 8, 0), outcome("reinit", 4, 0), outcome("reinit", 8, 0)]
    p = tmp_path / "out.csv"
    emit_csv(csv_rows(outs), str(p))
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 5
    rows = list(csv.DictReader(lines))
    assert [(r["strategy"], r["world_size"], r["rep"]) for r in rows] == [
        ("cr", "8", "0"), ("reinit", "4", "0"), ("reinit", "8", "0"), ("reinit", "8", "1")]
    # t = 0.25 + 2**-20 is exact in binary and far from a rounding tie
    assert rows[0]["t_app"] == "0.250001" and rows[0]["t_total"] == "1.250005"


def test_csv_ten_reps_and_empty(tmp_path):
    p = tmp_path / "ten.csv"
    emit_csv(csv_rows([outcome("ulfm", 4, r) for r in range(10)]), str(p))
    assert len(p.read_text().splitlines()) == 11
    emit_csv([], str(p))
    assert p.read_text() == ",".join(CSV_HEADER) + "\n"


def test_summarize_single_and_many():
    s = bench.summarize([outcome("cr", 4, 0, 0.5)])
    assert s["t_app"] == (0.5, 0.5, 0.0)
    s = bench.summarize([outcome("cr", 4, r, float(r + 1)) for r in range(3)])
    assert s["t_total"][0] == 10.0
