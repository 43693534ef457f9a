import csv
import io
import json

import pytest

from convssm.bench import ROW_FIELDS, BenchConfig, fit_loglog, run_bench


@pytest.fixture(scope="module")
def report():
    cfg = BenchConfig(lengths=(4, 8), threads=(1, 2), P=4, U=2, size=4, repeats=3)
    return run_bench(cfg, command="bench test")


def test_rows_cover_the_grid(report):
    assert len(report.rows) == 3 * 2 * 2
    for r in report.rows:
        assert r["wall_ms"] > 0 and r["wall_ms_min"] <= r["wall_ms"] <= r["wall_ms_max"]
        assert r["L"] in report.config["lengths"] and r["threads"] in report.config["threads"]
        assert r["P"] == report.config["P"] and r["method"] in report.config["methods"]


def test_convrnn_and_sequential_spans_equal_length(report):
    for r in report.rows:
        if r["method"] in ("convrnn", "convs5-seq"):
            assert r["span"] == r["L"]
        else:
            assert r["span"] < r["L"] and r["operator_invocations"] <= 2 * (r["L"] - 1)


def test_fits_and_speedups(report):
    assert {(f["method"], f["threads"]) for f in report.fits} == {
        (m, t) for m in ("convs5-par", "convs5-seq", "convrnn") for t in (1, 2)}
    assert report.speedup("convs5-par", 8) > 0
    assert isinstance(report.slope("convrnn", 2), float)
    with pytest.raises(KeyError):
        report.slope("convrnn", 16)


def test_ldjson_and_csv(report):
    records = [json.loads(line) for line in report.to_ldjson().splitlines()]
    assert records[0]["record"] == "config" and records[0]["environment"]["threads"] == [1, 2]
    assert sum(r["record"] == "row" for r in records) == len(report.rows)
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == ROW_FIELDS and len(rows) == len(report.rows)


def test_fit_loglog_recovers_power():
    slope, _ = fit_loglog([1, 2, 4, 8], [3, 6, 12, 24])
    assert abs(slope - 1) < 1e-12


@pytest.mark.parametrize("kw", [dict(methods=("fast",)), dict(lengths=()), dict(repeats=2),
                                dict(threads=(0,))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BenchConfig(**kw)
