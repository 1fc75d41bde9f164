from __future__ import annotations

import json
import math
from dataclasses import replace
from types import SimpleNamespace

import pytest

import ml2r.bench as bench
from ml2r._common import load_document, resolve_config_path
from ml2r.bench import (
    CSV_COLUMNS,
    PLAN_COLUMNS,
    BenchConfig,
    _config_from_args,
    build_parser,
    cmd_bench,
    cmd_calibrate,
    cmd_compare,
    cmd_plan,
    main,
    parse_k_grid,
    read_csv,
    write_csv,
)


def _synthetic(tmp_path, **changes) -> BenchConfig:
    doc = {"model": "synthetic", "kinds": ["ml2r", "mlmc"], "k_grid": [2, 3], "reps": 2,
           "out": str(tmp_path / "syn.csv"), **changes}
    return BenchConfig.from_document(doc)


def _header(path) -> list[str]:
    with open(path) as f:
        return f.readline().strip().split(",")


# === Config ===

def test_bench_config_defaults():
    config = BenchConfig()
    assert config.kinds == ("ml2r", "mlmc")
    assert config.epsilons == [0.5, 0.25, 0.125, 0.0625, 0.03125]
    assert BenchConfig.from_document(config.to_document()) == config


@pytest.mark.parametrize("bad", [
    {"kinds": ["romberg"]},
    {"kinds": []},
    {"k_grid": [0, 1]},
    {"reps": 1},
    {"m_max": 1},
    {"rounding": "ceil"},
    {"regime": "min"},
    {"m_selection": "finest"},
    {"template": "ml2r-diagonal"},
    {"workers": 0},
    {"budget_seconds": 0},
    {"precision": 3},
])
def test_bench_config_rejects(bad):
    with pytest.raises(ValueError):
        BenchConfig.from_document(bad)


@pytest.mark.parametrize("name", ["bench_call", "bench_barrier", "bench_nested"])
def test_shipped_bench_configs_load(name):
    config = BenchConfig.from_document(load_document(resolve_config_path(name)))
    assert config.reps == 64


def test_parse_k_grid():
    assert parse_k_grid("3") == (3,)
    assert parse_k_grid("1-4") == (1, 2, 3, 4)
    assert parse_k_grid("1-3, 6") == (1, 2, 3, 6)
    with pytest.raises(ValueError):
        parse_k_grid(" , ")


def test_env_defaults_and_flag_precedence():
    env = {"ML2R_WORKERS": "3", "ML2R_SEED": "5"}
    parser = build_parser()
    config = _config_from_args(parser.parse_args(["run", "--model", "synthetic"]), env)
    assert (config.workers, config.seed) == (3, 5)
    config = _config_from_args(parser.parse_args(["run", "--model", "synthetic", "-w", "2", "--seed", "8"]), env)
    assert (config.workers, config.seed) == (2, 8)
    with pytest.raises(ValueError):
        _config_from_args(parser.parse_args(["run"]), {"ML2R_WORKERS": "many"})


# === plan ===

def test_cmd_plan_rows(tmp_path):
    out = tmp_path / "plan.csv"
    config = BenchConfig(model="call", kinds=("ml2r", "mlmc"), k_grid=(3, 8), out=str(out))
    rows = cmd_plan(config)
    assert [(r["kind"], r["k"], r["R"], r["M"]) for r in rows] == \
           [("ml2r", 3, 3, 4), ("ml2r", 8, 3, 9), ("mlmc", 3, 3, 4), ("mlmc", 8, 4, 8)]
    assert all(r["h_inv"] == 1 for r in rows)
    assert _header(out) == PLAN_COLUMNS
    back = read_csv(out)
    assert back[1]["N"] == rows[1]["N"]
    assert back[1]["cost"] == pytest.approx(rows[1]["cost"])


def test_cmd_plan_overrides():
    config = BenchConfig(model="call", kinds=("ml2r",), k_grid=(1, 2, 3))
    rows = cmd_plan(config, overrides={"M": 2})
    assert [r["M"] for r in rows] == [2, 2, 2]
    assert [r["R"] for r in rows] == sorted(r["R"] for r in rows)


def test_cmd_plan_template():
    config = BenchConfig(model="call", kinds=("ml2r", "mlmc"), k_grid=(4,), template="ml2r-lower-triangular")
    rows = cmd_plan(config)
    assert [r["template"] for r in rows] == ["ml2r-lower-triangular", "mlmc"]


# === calibrate ===

def test_cmd_calibrate_writes_params(tmp_path):
    out = tmp_path / "synthetic_params.json"
    config = BenchConfig(model="synthetic", calibration_samples=2000, out=str(out))
    params = cmd_calibrate(config)
    doc = json.loads(out.read_text())
    assert doc["V1"] == params.V1
    assert doc["model"] == "synthetic"
    assert params.c1 == 1.0


def test_calibrate_flag_feeds_the_planner(tmp_path, monkeypatch):
    monkeypatch.setenv("ML2R_OUTPUT_DIR", str(tmp_path))
    config = _synthetic(tmp_path, calibrate=True, calibration_samples=2000, out=None)
    rows = cmd_plan(config)
    assert len(rows) == 4
    assert (tmp_path / "synthetic_params.json").exists()


# === bench ===

def test_cmd_bench_outputs(tmp_path):
    config = _synthetic(tmp_path)
    results = cmd_bench(config)
    assert {kind: len(rows) for kind, rows in results.items()} == {"ml2r": 2, "mlmc": 2}
    for kind in ("ml2r", "mlmc"):
        path = tmp_path / f"syn_{kind}.csv"
        assert _header(path) == CSV_COLUMNS
        back = read_csv(path)
        assert [r["k"] for r in back] == [2, 3]
        assert back[0]["N"] == results[kind][0]["N"]
    series = read_csv(tmp_path / "syn_series.csv")
    assert len(series) == 4
    assert series[0]["rmse_ratio"] == pytest.approx(results["ml2r"][0]["l2_error"] / 0.25)
    meta = json.loads((tmp_path / "syn_meta.json").read_text())
    assert meta["columns"] == CSV_COLUMNS
    assert meta["reference"] == 1.0


def test_cmd_bench_single_kind_uses_out_path(tmp_path):
    config = _synthetic(tmp_path, kinds=["ml2r"], k_grid=[2])
    cmd_bench(config)
    assert _header(tmp_path / "syn.csv") == CSV_COLUMNS


def test_cmd_bench_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("ML2R_OUTPUT_DIR", str(tmp_path / "out"))
    cmd_bench(_synthetic(tmp_path, kinds=["mlmc"], k_grid=[2], out=None))
    assert (tmp_path / "out" / "synthetic_bench.csv").exists()


def test_cmd_bench_is_deterministic_across_workers(tmp_path):
    serial = cmd_bench(_synthetic(tmp_path, out=str(tmp_path / "a.csv"), workers=1))
    parallel = cmd_bench(_synthetic(tmp_path, out=str(tmp_path / "b.csv"), workers=8))
    for kind in serial:
        for a, b in zip(serial[kind], parallel[kind]):
            assert {k: v for k, v in a.items() if k != "time_s"} == {k: v for k, v in b.items() if k != "time_s"}


def test_cmd_bench_budget_writes_partial_results(tmp_path):
    results = cmd_bench(_synthetic(tmp_path, budget_seconds=1e-9))
    assert results == {"ml2r": [], "mlmc": []}
    assert _header(tmp_path / "syn_ml2r.csv") == CSV_COLUMNS
    assert read_csv(tmp_path / "syn_ml2r.csv") == []


def test_cmd_bench_budget_stops_before_an_oversized_cell(tmp_path, monkeypatch):
    # one fake second per million cost units
    clock = [0.0]
    monkeypatch.setattr(bench, "time", SimpleNamespace(perf_counter=lambda: clock[0]))
    real_cell = bench.bench_cell

    def timed_cell(config, model, params, kind, epsilon, plan=None):
        row = real_cell(config, model, params, kind, epsilon, plan=plan)
        clock[0] += row["cost"] * config.reps * 1e-6
        return row

    monkeypatch.setattr(bench, "bench_cell", timed_cell)
    config = _synthetic(tmp_path, kinds=["ml2r"], k_grid=[2, 3])
    cost2, cost3 = (r["cost"] for r in cmd_plan(replace(config, out=None)))
    assert cost3 > cost2
    budget = config.reps * 1e-6 * (cost2 + 0.5 * cost3)
    results = cmd_bench(replace(config, budget_seconds=budget))
    assert [r["k"] for r in results["ml2r"]] == [2]


# === compare ===

def _table(path, rows):
    write_csv(path, CSV_COLUMNS, rows)
    return path


def _row(k, cost, time_s, l2):
    return {"k": k, "eps": 2.0 ** -k, "l2_error": l2, "time_s": time_s, "bias": 0.0, "var": l2 ** 2,
            "R": 3, "M": 4, "h_inv": 1, "N": 1000, "cost": cost}


def test_compare_identical_tables(tmp_path):
    path = _table(tmp_path / "a.csv", [_row(3, 7.0e5, 0.5, 0.12), _row(4, 2.8e6, 2.0, 0.06)])
    rows = cmd_compare(path, path)
    for row in rows:
        assert row["cost_ratio"] == pytest.approx(1.0)
        assert row["time_ratio"] == pytest.approx(1.0)
        assert row["time_ratio_at_equal_rmse"] == pytest.approx(1.0)


def test_compare_ratios(tmp_path):
    mlmc = _table(tmp_path / "mlmc.csv", [_row(8, 1.62e9, 4.0, 0.004), _row(9, 6.6e9, 16.0, 0.002)])
    ml2r = _table(tmp_path / "ml2r.csv", [_row(7, 1.95e8, 0.5, 0.008), _row(8, 8.37e8, 2.0, 0.004)])
    out = tmp_path / "cmp.csv"
    rows = cmd_compare(mlmc, ml2r, str(out))
    assert [r["k"] for r in rows] == [8]
    assert rows[0]["cost_ratio"] == pytest.approx(1.62e9 / 8.37e8)
    assert rows[0]["time_ratio"] == pytest.approx(2.0)
    assert read_csv(out)[0]["k"] == 8


def test_compare_needs_shared_grid(tmp_path):
    a = _table(tmp_path / "a.csv", [_row(3, 1.0, 1.0, 0.1)])
    b = _table(tmp_path / "b.csv", [_row(4, 1.0, 1.0, 0.1)])
    with pytest.raises(ValueError):
        cmd_compare(a, b)
    with pytest.raises(ValueError):
        cmd_compare(tmp_path / "missing.csv", b)


def test_compare_interpolation_without_enough_points(tmp_path):
    a = _table(tmp_path / "a.csv", [_row(3, 1.0, 1.0, 0.1)])
    assert math.isnan(cmd_compare(a, a)[0]["time_ratio_at_equal_rmse"])


# === CLI ===

def test_main_plan(capsys):
    assert main(["plan", "--model", "call", "--kind", "ml2r", "--eps-grid", "1-3", "--M", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split(",") == PLAN_COLUMNS
    assert len(lines) == 4
    assert all(line.split(",")[5] == "2" for line in lines[1:])


def test_main_reports_errors(capsys):
    assert main(["plan", "--model", "call", "--eps-grid", "0"]) == 1
    assert capsys.readouterr().err.startswith("ERROR:")
    assert main(["compare", "nowhere_a.csv", "nowhere_b.csv"]) == 1
