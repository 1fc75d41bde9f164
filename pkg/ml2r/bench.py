#!/usr/bin/env python3
"""
bench.py
--------
Command-line harness: calibrate, plan, run, bench and compare.

Usage:
    python -m ml2r calibrate --model call
    python -m ml2r plan --model call --kind ml2r --eps-grid 1-8
    python -m ml2r run --model call --kind ml2r --eps-grid 3
    python -m ml2r bench --config configs/bench_call.json
    python -m ml2r compare results/call_mlmc.csv results/call_ml2r.csv
"""

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ._common import (
    DEFAULT_OUTPUT_DIR,
    DEFAULT_SEED,
    ML2RError,
    check_keys,
    env_int,
    env_str,
    load_document,
    load_env,
    resolve_config_path,
    save_document,
    setup_logging,
    verbosity_to_level,
)
from .core import TEMPLATES
from .engine import calibrate, replicate
from .models import MODELS, Model, load_model
from .plan import KINDS, M_SELECTIONS, REGIMES, ROUNDINGS, Plan, StructuralParams, make_plan

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["k", "eps", "l2_error", "time_s", "bias", "var", "R", "M", "h_inv", "N", "cost"]
PLAN_COLUMNS = ["kind", "k", "eps", "template", "R", "M", "h_inv", "N", "cost", "q", "flags"]
COMPARE_COLUMNS = ["k", "eps", "cost_ratio", "time_ratio", "time_ratio_at_equal_rmse"]
SERIES_COLUMNS = ["kind", "k", "eps", "rmse_ratio", "time_eps2"]
TIMING_COLUMNS = ("time_s",)
CSV_SCHEMA_VERSION = 1

BENCH_KEYS = {"model", "kinds", "k_grid", "reps", "m_max", "rounding", "regime", "seed",
              "calibration_samples", "out", "budget_seconds", "workers", "m_selection",
              "params", "calibrate", "template"}


class BudgetExceeded(ML2RError):
    """The wall-clock budget of a bench run ran out."""


# === Config ===

@dataclass(frozen=True)
class BenchConfig:
    model: str = "call"
    kinds: tuple[str, ...] = ("ml2r", "mlmc")
    k_grid: tuple[int, ...] = (1, 2, 3, 4, 5)    # epsilon = 2^-k
    reps: int = 64                               # L
    m_max: int = 10
    rounding: str = "nearest"
    regime: Optional[str] = None                 # None: the model's own regime
    seed: int = DEFAULT_SEED
    calibration_samples: int = 100_000
    out: Optional[str] = None
    budget_seconds: Optional[float] = None
    workers: int = 1
    m_selection: str = "coarsest"
    template: Optional[str] = None
    params: Optional[dict] = None                # frozen StructuralParams override
    calibrate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))
        for kind in self.kinds:
            if kind not in KINDS:
                raise ValueError(f"Unknown estimator kind '{kind}'. Expected one of {KINDS}")
        if not self.kinds:
            raise ValueError("At least one estimator kind is required")
        if not self.k_grid or any(k < 1 for k in self.k_grid):
            raise ValueError(f"k_grid entries must be >= 1 so that eps = 2^-k lies in (0, 1), got {self.k_grid}")
        if self.reps < 2:
            raise ValueError(f"reps must be >= 2, got {self.reps}")
        if self.m_max < 2:
            raise ValueError(f"m_max must be >= 2, got {self.m_max}")
        if self.rounding not in ROUNDINGS:
            raise ValueError(f"Unknown rounding '{self.rounding}'. Expected one of {ROUNDINGS}")
        if self.regime is not None and self.regime not in REGIMES:
            raise ValueError(f"Unknown cost regime '{self.regime}'. Expected one of {REGIMES}")
        if self.m_selection not in M_SELECTIONS:
            raise ValueError(f"Unknown M selection '{self.m_selection}'. Expected one of {M_SELECTIONS}")
        if self.template is not None and self.template not in TEMPLATES:
            raise ValueError(f"Unknown template '{self.template}'. Expected one of {TEMPLATES}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.budget_seconds is not None and not self.budget_seconds > 0:
            raise ValueError(f"budget_seconds must be > 0, got {self.budget_seconds}")

    @property
    def epsilons(self) -> list[float]:
        return [2.0 ** -k for k in self.k_grid]

    @classmethod
    def from_document(cls, doc: dict) -> "BenchConfig":
        check_keys(doc, BENCH_KEYS, "bench config")
        return cls(**doc)

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["kinds"] = list(self.kinds)
        doc["k_grid"] = list(self.k_grid)
        return doc


def parse_k_grid(text: str) -> tuple[int, ...]:
    """'3', '1-8' or '3,4,6' -> tuple of k values."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError(f"Empty epsilon grid: '{text}'")
    return tuple(out)


# === CSV helpers ===

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return str(int(value)) if value.is_integer() and abs(value) < 2 ** 53 else repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_fmt(v) for v in value)
    return str(value)


def _parse(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def write_csv(path: str | Path, columns: list[str], rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def read_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Results file not found: {path}")
    with open(path, newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _print_rows(columns: list[str], rows: list[dict]):
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])


# === Model and parameter resolution ===

def _k_of(epsilon: float) -> int:
    return round(-math.log2(epsilon))


def _regime(config: BenchConfig, model: Model) -> str:
    return config.regime or model.regime


def resolve_params(config: BenchConfig, model: Model) -> StructuralParams:
    """Frozen model parameters, an explicit override, or a fresh calibration."""
    if config.params:
        return StructuralParams.from_dict({**model.params.to_dict(), **config.params})
    if config.calibrate:
        return cmd_calibrate(config, model)
    return model.params


def _plan(config: BenchConfig, model: Model, params: StructuralParams, kind: str, epsilon: float,
          overrides: Optional[dict] = None) -> Plan:
    template = config.template if kind == "ml2r" else None
    return make_plan(kind, epsilon, params, _regime(config, model), overrides, M_max=config.m_max,
                     rounding=config.rounding, m_selection=config.m_selection, template=template)


def _plan_row(plan: Plan) -> dict:
    return {
        "kind": plan.kind,
        "k": _k_of(plan.epsilon),
        "eps": plan.epsilon,
        "template": plan.template,
        "R": plan.R,
        "M": plan.M,
        "h_inv": plan.h_inv,
        "N": plan.N,
        "cost": plan.cost,
        "q": list(plan.q),
        "flags": list(plan.flags),
    }


def _output_dir() -> Path:
    return Path(env_str("ML2R_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))


# === Subcommands ===

def cmd_calibrate(config: BenchConfig, model: Optional[Model] = None) -> StructuralParams:
    """Estimate V1 and var(Y_0) for the model and persist them as JSON."""
    model = model or load_model(config.model)
    print(f"=== Calibrating {model.model_id} ({config.calibration_samples} samples) ===")
    params = calibrate(model.sampler, model.alpha, model.beta, sample_size=config.calibration_samples,
                       seed=config.seed, M_probe=config.m_max, workers=config.workers)
    params = replace(params, c1=model.params.c1, c_tilde=model.params.c_tilde)
    print(f"  alpha = {params.alpha}")
    print(f"  beta  = {params.beta}")
    print(f"  V1    = {params.V1:.4f}")
    print(f"  var   = {params.var_Y0:.4f}")
    print(f"  theta = {params.theta():.4f}")

    if config.out and Path(config.out).suffix == ".json":
        out = Path(config.out)
    else:
        out = _output_dir() / f"{model.model_id}_params.json"
    save_document(out, {**params.to_dict(), "theta": params.theta(), "model": model.model_id,
                        "samples": config.calibration_samples, "seed": config.seed})
    print(f"Saved: {out}")
    return params


def cmd_plan(config: BenchConfig, params: Optional[StructuralParams] = None,
             overrides: Optional[dict] = None) -> list[dict]:
    """One plan row per (kind, epsilon)."""
    model = load_model(config.model)
    params = params or resolve_params(config, model)
    rows = []
    for kind in config.kinds:
        for epsilon in config.epsilons:
            rows.append(_plan_row(_plan(config, model, params, kind, epsilon, overrides)))
    if config.out:
        write_csv(config.out, PLAN_COLUMNS, rows)
        print(f"Saved: {config.out}")
    return rows


def bench_cell(config: BenchConfig, model: Model, params: StructuralParams, kind: str,
               epsilon: float, plan: Optional[Plan] = None) -> dict:
    """Plan (unless given) and replicate one (kind, epsilon) cell; returns its results row."""
    plan = plan or _plan(config, model, params, kind, epsilon)
    stats = replicate(plan, model.sampler, config.reps, config.seed, model.reference, config.workers)
    if stats.flags:
        logger.warning("%s eps=%g: run flags %s", kind, epsilon, ", ".join(stats.flags))
    return {
        "k": _k_of(epsilon),
        "eps": epsilon,
        "l2_error": stats.eps_tilde,
        "time_s": stats.mean_time,
        "bias": stats.mu_tilde,
        "var": stats.nu_tilde,
        "R": plan.R,
        "M": plan.M,
        "h_inv": plan.h_inv,
        "N": plan.N,
        "cost": plan.cost,
    }


def cmd_run(config: BenchConfig) -> dict:
    """Single (kind, epsilon) cell: the first kind and first k of the config."""
    model = load_model(config.model)
    params = resolve_params(config, model)
    row = bench_cell(config, model, params, config.kinds[0], config.epsilons[0])
    _print_rows(CSV_COLUMNS, [row])
    return row


def _results_paths(config: BenchConfig) -> tuple[dict[str, Path], Path, Path]:
    """Results CSV per kind, the series CSV and the run metadata JSON."""
    out = Path(config.out) if config.out else _output_dir() / f"{config.model}_bench.csv"
    if len(config.kinds) == 1:
        paths = {config.kinds[0]: out}
    else:
        paths = {kind: out.with_name(f"{out.stem}_{kind}{out.suffix or '.csv'}") for kind in config.kinds}
    return paths, out.with_name(f"{out.stem}_series.csv"), out.with_name(f"{out.stem}_meta.json")


def cmd_bench(config: BenchConfig) -> dict[str, list[dict]]:
    """Replicated runs over the kind x epsilon grid; one results CSV per kind plus a series CSV."""
    model = load_model(config.model)
    params = resolve_params(config, model)
    paths, series_path, meta_path = _results_paths(config)
    results: dict[str, list[dict]] = {kind: [] for kind in config.kinds}
    start = time.perf_counter()
    spent_seconds = 0.0
    spent_units = 0.0

    print(f"=== Bench {model.model_id}: {', '.join(config.kinds)} over k={list(config.k_grid)}, "
          f"L={config.reps} ===")
    try:
        for kind in config.kinds:
            for epsilon in config.epsilons:
                plan = _plan(config, model, params, kind, epsilon)
                if config.budget_seconds is not None:
                    elapsed = time.perf_counter() - start
                    # seconds per cost unit observed so far; nothing to project from before the first cell
                    projected = plan.cost * config.reps * spent_seconds / spent_units if spent_units else 0.0
                    if elapsed + projected > config.budget_seconds:
                        raise BudgetExceeded(f"Budget of {config.budget_seconds}s reached: {elapsed:.1f}s spent, "
                                             f"next cell ({kind}, eps={epsilon:g}) projected at {projected:.1f}s")
                cell_start = time.perf_counter()
                row = bench_cell(config, model, params, kind, epsilon, plan=plan)
                spent_seconds += time.perf_counter() - cell_start
                spent_units += plan.cost * config.reps
                results[kind].append(row)
                print(f"  {kind:<9} k={row['k']:<2} R={row['R']} M={row['M']} h_inv={_fmt(row['h_inv'])} "
                      f"N={row['N']} l2={row['l2_error']:.3e} t={row['time_s']:.3f}s")
    except BudgetExceeded as e:
        logger.warning("%s; writing partial results", e)

    series = []
    for kind in config.kinds:
        write_csv(paths[kind], CSV_COLUMNS, results[kind])
        print(f"Saved: {paths[kind]}")
        for row in results[kind]:
            series.append({
                "kind": kind,
                "k": row["k"],
                "eps": row["eps"],
                "rmse_ratio": row["l2_error"] / row["eps"],
                "time_eps2": row["time_s"] * row["eps"] ** 2,
            })
    write_csv(series_path, SERIES_COLUMNS, series)
    save_document(meta_path,
                  {"schema": CSV_SCHEMA_VERSION, "columns": CSV_COLUMNS, "config": config.to_document(),
                   "params": params.to_dict(), "reference": model.reference})
    print(f"Saved: {series_path}")
    return results


def _time_at_rmse(rows: list[dict], rmse: float) -> float:
    """Log-log interpolation of time against RMSE over a results table."""
    pts = sorted((r["l2_error"], r["time_s"]) for r in rows if r["l2_error"] and r["time_s"] and r["time_s"] > 0)
    if len(pts) < 2 or not rmse or rmse <= 0:
        return math.nan
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.exp(np.interp(math.log(rmse), x, y)))


def _ratio(a, b) -> float:
    if a is None or b is None or b == 0:
        return math.nan
    return a / b


def cmd_compare(results_a: str | Path, results_b: str | Path, out: Optional[str] = None) -> list[dict]:
    """Per-epsilon ratios a / b of cost and time, plus time at equal empirical RMSE."""
    rows_a = read_csv(results_a)
    rows_b = read_csv(results_b)
    by_k = {r["k"]: r for r in rows_b}
    common = [r for r in rows_a if r["k"] in by_k]
    if not common:
        raise ValueError(f"No common k values between {results_a} and {results_b}")
    rows = []
    for a in common:
        b = by_k[a["k"]]
        rows.append({
            "k": a["k"],
            "eps": a["eps"],
            "cost_ratio": _ratio(a["cost"], b["cost"]),
            "time_ratio": _ratio(a["time_s"], b["time_s"]),
            "time_ratio_at_equal_rmse": _ratio(a["time_s"], _time_at_rmse(rows_b, a["l2_error"])),
        })
    if out:
        write_csv(out, COMPARE_COLUMNS, rows)
        print(f"Saved: {out}")
    return rows


# === CLI ===

def _config_from_args(args, env: dict) -> BenchConfig:
    doc = load_document(resolve_config_path(args.config)) if getattr(args, "config", None) else {}
    check_keys(doc, BENCH_KEYS, "bench config")
    doc.setdefault("workers", env_int("ML2R_WORKERS", 1, env))
    doc.setdefault("seed", env_int("ML2R_SEED", DEFAULT_SEED, env))
    flags = {
        "model": args.model,
        "kinds": args.kind,
        "k_grid": parse_k_grid(args.eps_grid) if args.eps_grid else None,
        "reps": args.reps,
        "seed": args.seed,
        "m_max": args.m_max,
        "rounding": args.rounding,
        "regime": args.regime,
        "out": args.out,
        "budget_seconds": args.budget_seconds,
        "workers": args.workers,
        "m_selection": args.m_selection,
        "template": args.template,
        "calibration_samples": args.calibration_samples,
        "calibrate": True if args.calibrate else None,
    }
    doc.update({k: v for k, v in flags.items() if v is not None})
    return BenchConfig.from_document(doc)


def _overrides_from_args(args) -> Optional[dict]:
    overrides = {}
    for key in ("M", "R", "n_h", "N"):
        value = getattr(args, f"override_{key}", None)
        if value is not None:
            overrides[key] = value
    return overrides or None


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", "-c", help="Bench config JSON (path or name under configs/)")
    p.add_argument("--model", choices=sorted(MODELS), help="Model preset (default: call)")
    p.add_argument("--kind", action="append", choices=KINDS,
                   help="Estimator kind, repeatable (default: ml2r and mlmc)")
    p.add_argument("--eps-grid", help="k values with eps = 2^-k: '3', '1-8' or '3,4,5'")
    p.add_argument("--reps", type=int, help="Replications L (default: 64)")
    p.add_argument("--seed", type=int, help=f"Base seed (default: ML2R_SEED or {DEFAULT_SEED})")
    p.add_argument("--m-max", type=int, help="Largest refiner root searched (default: 10)")
    p.add_argument("--rounding", choices=ROUNDINGS, help="Rounding of the depth R (default: nearest)")
    p.add_argument("--regime", choices=REGIMES, help="Cost regime (default: the model's)")
    p.add_argument("--m-selection", choices=M_SELECTIONS, help="Root selection rule (default: coarsest)")
    p.add_argument("--template", choices=TEMPLATES, help="Allocation template for ml2r")
    p.add_argument("--out", "-o", help="Output file")
    p.add_argument("--budget-seconds", type=float, help="Wall-clock cap for bench")
    p.add_argument("--workers", "-w", type=int, help="Thread-pool width (default: ML2R_WORKERS or 1)")
    p.add_argument("--calibrate", action="store_true", help="Calibrate instead of using frozen parameters")
    p.add_argument("--calibration-samples", type=int, help="Calibration sample size (default: 100000)")
    p.add_argument("--verbose", "-v", action="count", default=0, help="More logging (-v info, -vv debug)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m ml2r",
        description="Multilevel Richardson-Romberg Monte Carlo: calibrate, plan, run and benchmark estimators",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Calibrate the call model (V1, var(Y_0))
  python -m ml2r calibrate --model call

  # Plan table for eps = 2^-1 .. 2^-8
  python -m ml2r plan --model call --kind ml2r --eps-grid 1-8

  # Pin the root and recompute the depth
  python -m ml2r plan --model call --kind ml2r --eps-grid 1-8 --M 2

  # One cell
  python -m ml2r run --model call --kind ml2r --eps-grid 3 --reps 64

  # Full bench from a config, 8 threads
  python -m ml2r bench --config bench_call --workers 8

  # Ratios between two result tables
  python -m ml2r compare results/call_bench_mlmc.csv results/call_bench_ml2r.csv
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="Estimate V1 and var(Y_0)")
    _add_common(cal)
    cal.set_defaults(func=_main_calibrate)

    pl = sub.add_parser("plan", help="Optimal parameters per (kind, eps)")
    _add_common(pl)
    pl.add_argument("--M", dest="override_M", type=int, help="Pin the refiner root")
    pl.add_argument("--R", dest="override_R", type=int, help="Pin the depth")
    pl.add_argument("--h-inv", dest="override_n_h", type=int, help="Pin h = h_max / h_inv")
    pl.add_argument("--N", dest="override_N", type=int, help="Pin the sample budget")
    pl.set_defaults(func=_main_plan)

    rn = sub.add_parser("run", help="Replicate one (kind, eps) cell")
    _add_common(rn)
    rn.set_defaults(func=_main_run)

    bn = sub.add_parser("bench", help="Replicate the whole kind x eps grid")
    _add_common(bn)
    bn.set_defaults(func=_main_bench)

    cmp = sub.add_parser("compare", help="Ratios between two results CSVs")
    cmp.add_argument("results_a", help="Numerator results CSV")
    cmp.add_argument("results_b", help="Denominator results CSV")
    cmp.add_argument("--out", "-o", help="Output CSV")
    cmp.add_argument("--verbose", "-v", action="count", default=0)
    cmp.set_defaults(func=_main_compare)
    return parser


def _main_calibrate(args, env):
    cmd_calibrate(_config_from_args(args, env))


def _main_plan(args, env):
    config = _config_from_args(args, env)
    rows = cmd_plan(replace(config, out=None), overrides=_overrides_from_args(args))
    _print_rows(PLAN_COLUMNS, rows)
    if config.out:
        write_csv(config.out, PLAN_COLUMNS, rows)
        print(f"Saved: {config.out}")


def _main_run(args, env):
    cmd_run(_config_from_args(args, env))


def _main_bench(args, env):
    cmd_bench(_config_from_args(args, env))


def _main_compare(args, env):
    rows = cmd_compare(args.results_a, args.results_b, args.out)
    _print_rows(COMPARE_COLUMNS, rows)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    env = load_env()
    setup_logging(verbosity_to_level(args.verbose, env_str("ML2R_LOG_LEVEL", "WARNING", env)))
    try:
        args.func(args, env)
    except (ValueError, ML2RError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
