from __future__ import annotations

import math

import numpy as np
import pytest

from ml2r.engine import (
    LevelSizeError,
    Moments,
    _strata,
    calibrate,
    estimate_V1,
    estimate_var_Y0,
    expected_estimate,
    replicate,
    run,
    stratum_draws,
)
from ml2r.models import SyntheticParams, load_model, synthetic_sampler
from ml2r.plan import StructuralParams, make_plan
from ml2r.rng import CHUNK_SIZE, Stream, StreamKey

UNIT = StructuralParams(alpha=1.0, beta=1.0, V1=1.0, var_Y0=1.0)


def _pinned(kind, R, M=2, n_h=1, N=1000, params=UNIT):
    return make_plan(kind, 0.1, params, overrides={"M": M, "R": R, "n_h": n_h, "N": N})


# === Single runs ===

def test_ml2r_removes_first_order_bias(affine_sampler):
    result = run(_pinned("ml2r", 2), affine_sampler, seed=1)
    assert result.estimate == pytest.approx(2.0, abs=1e-12)
    assert result.nu_bar == pytest.approx(0.0, abs=1e-12)
    assert len(result.level_sizes) == 2


def test_mlmc_keeps_finest_bias(affine_sampler):
    result = run(_pinned("mlmc", 2), affine_sampler, seed=1)
    assert result.estimate == pytest.approx(2.5, abs=1e-12)


def test_crude_and_multistep_runs(affine_sampler):
    crude = run(make_plan("crude", 0.1, UNIT, overrides={"n_h": 4, "N": 100}), affine_sampler, seed=1)
    assert crude.estimate == pytest.approx(2.25, abs=1e-12)
    multistep = run(make_plan("multistep", 0.1, UNIT, refiners=(1, 2, 3)), affine_sampler, seed=1)
    assert multistep.estimate == pytest.approx(2.0, abs=1e-12)
    assert len(multistep.level_sizes) == 1


def test_cost_units(affine_sampler):
    plan = _pinned("ml2r", 3, M=2, n_h=2)
    result = run(plan, affine_sampler, seed=1)
    expected = sum(n * b for n, b in zip(plan.level_sizes(), plan.level_costs())) * 2
    assert result.cost_units == pytest.approx(expected)


def test_run_is_independent_of_workers(synthetic):
    plan = make_plan("ml2r", 0.02, UNIT)
    serial = run(plan, synthetic, seed=9, chunk_size=512)
    parallel = run(plan, synthetic, seed=9, workers=8, chunk_size=512)
    assert serial.estimate == parallel.estimate
    assert serial.nu_bar == parallel.nu_bar
    assert serial.level_means == parallel.level_means


def test_nu_bar_matches_direct_level_variances(synthetic):
    plan = make_plan("ml2r", 0.1, UNIT, overrides={"M": 2, "R": 3, "n_h": 1, "N": 2000})
    result = run(plan, synthetic, seed=6)
    sizes = list(result.level_sizes)
    assert max(sizes) <= CHUNK_SIZE
    base = StreamKey(6, 0)
    draws = [stratum_draws(synthetic, plan.h, s, Stream(base.with_(level=s.column, chunk=0)), s.size)
             for s in _strata(plan, sizes)]
    assert result.nu_bar == pytest.approx(math.fsum(np.var(d, ddof=1) / d.size for d in draws), rel=1e-10)
    assert result.estimate == pytest.approx(math.fsum(d.mean() for d in draws), rel=1e-12)


def test_seed_and_replication_change_the_draws(synthetic):
    plan = make_plan("ml2r", 0.05, UNIT)
    base = run(plan, synthetic, seed=9).estimate
    assert run(plan, synthetic, seed=10).estimate != base
    assert run(plan, synthetic, seed=9, replication=1).estimate != base


def test_tiny_levels_are_promoted(affine_sampler):
    result = run(_pinned("ml2r", 3, N=1), affine_sampler, seed=1)
    assert all(n >= 2 for n in result.level_sizes)
    assert "N_promoted" in result.flags


# === Moments ===

def test_moments_merge_matches_single_pass():
    values = np.random.default_rng(0).standard_normal(1001)
    merged = Moments()
    for part in np.array_split(values, 7):
        merged = merged.merge(Moments.of(part))
    whole = Moments.of(values)
    assert merged.count == whole.count
    assert merged.mean == pytest.approx(whole.mean, abs=1e-14)
    assert merged.variance == pytest.approx(whole.variance, rel=1e-12)
    assert merged.variance == pytest.approx(np.var(values, ddof=1), rel=1e-12)


def test_variance_needs_two_samples():
    with pytest.raises(LevelSizeError):
        Moments.of(np.array([1.0])).variance
    assert issubclass(LevelSizeError, ValueError)


# === Replications ===

def test_replicate_statistics(synthetic):
    plan = make_plan("ml2r", 0.05, UNIT)
    stats = replicate(plan, synthetic, L=8, base_seed=4, reference=1.0)
    assert stats.L == 8
    assert len(stats.estimates) == 8
    assert stats.mean_estimate == pytest.approx(sum(stats.estimates) / 8)
    assert stats.mu_tilde == pytest.approx(stats.mean_estimate - 1.0)
    assert stats.eps_tilde == pytest.approx(math.sqrt(stats.mu_tilde ** 2 + stats.nu_tilde))
    assert stats.estimates[0] == run(plan, synthetic, seed=4, replication=0).estimate
    again = replicate(plan, synthetic, L=8, base_seed=4, reference=1.0, workers=4)
    assert again.estimates == stats.estimates


def test_replicate_without_reference(synthetic):
    stats = replicate(make_plan("mlmc", 0.1, UNIT), synthetic, L=2, base_seed=4)
    assert stats.mu_tilde is None
    assert stats.eps_tilde == pytest.approx(math.sqrt(stats.nu_tilde))


def test_replicate_needs_two_runs(synthetic):
    with pytest.raises(ValueError):
        replicate(make_plan("ml2r", 0.1, UNIT), synthetic, L=1, base_seed=0)


def test_ml2r_error_close_to_target(synthetic):
    eps = 0.02
    stats = replicate(make_plan("ml2r", eps, UNIT), synthetic, L=32, base_seed=2, reference=1.0)
    assert stats.eps_tilde < 1.3 * eps


@pytest.mark.parametrize("template", ["ml2r-telescopic", "ml2r-first-column", "ml2r-lower-triangular"])
def test_templates_agree_with_exact_expectation(synthetic, template):
    eps = 0.02
    plan = make_plan("ml2r", eps, UNIT, template=template)
    assert plan.template == template
    stats = replicate(plan, synthetic, L=16, base_seed=3, reference=1.0)
    se = math.sqrt(stats.nu_tilde / stats.L)
    assert abs(stats.mean_estimate - expected_estimate(plan, synthetic.mean)) < 4 * se
    assert stats.eps_tilde < 1.3 * eps


# === Bias order ===

def _bias_slope(kind, R, sampler):
    hs = [1 / 16, 1 / 32, 1 / 64, 1 / 128]
    biases = [abs(expected_estimate(_pinned(kind, R, n_h=round(1 / h), N=10), sampler.mean) - sampler.p.y0_mean)
              for h in hs]
    return np.polyfit(np.log(hs), np.log(biases), 1)[0]


@pytest.mark.parametrize("kind,R,order", [("mlmc", 2, 1), ("ml2r", 2, 2), ("ml2r", 3, 3)])
def test_bias_order(synthetic, kind, R, order):
    assert _bias_slope(kind, R, synthetic) == pytest.approx(order, abs=0.1)


# === Calibration ===

def test_estimate_V1_recovers_strong_constant():
    sampler = synthetic_sampler(SyntheticParams(coeffs=(), V1=4.0))
    assert estimate_V1(sampler, sample_size=100_000, seed=3) == pytest.approx(4.0, rel=0.03)


def test_estimate_var_Y0(synthetic, affine_sampler):
    assert estimate_var_Y0(synthetic, sample_size=100_000, seed=3) == pytest.approx(2.0, rel=0.03)
    assert estimate_var_Y0(affine_sampler, sample_size=2000) == pytest.approx(0.0, abs=1e-20)


def test_calibrate(synthetic):
    params = calibrate(synthetic, alpha=1.0, beta=1.0, sample_size=50_000, seed=5)
    assert params.h_max == 1.0
    assert params.var_Y0 == pytest.approx(2.0, rel=0.05)
    with pytest.raises(ValueError):
        calibrate(synthetic, alpha=1.0, beta=1.0, sample_size=10)


def test_calibration_is_independent_of_workers(synthetic):
    assert estimate_V1(synthetic, sample_size=40_000, seed=1) == \
           estimate_V1(synthetic, sample_size=40_000, seed=1, workers=4)


# === Benchmark models ===

@pytest.mark.slow
@pytest.mark.parametrize("kind", ["ml2r", "mlmc"])
@pytest.mark.parametrize("k", [3, 4])
def test_call_reaches_target(kind, k):
    model = load_model("call")
    eps = 2.0 ** -k
    stats = replicate(make_plan(kind, eps, model.params), model.sampler, L=64, base_seed=1,
                      reference=model.reference, workers=4)
    assert stats.eps_tilde <= 1.25 * eps


@pytest.mark.slow
def test_ml2r_bias_does_not_exceed_mlmc_bias():
    model = load_model("call")
    eps = 2.0 ** -4
    bias = {kind: replicate(make_plan(kind, eps, model.params), model.sampler, L=64, base_seed=1,
                            reference=model.reference, workers=4).mu_tilde
            for kind in ("ml2r", "mlmc")}
    assert abs(bias["ml2r"]) <= abs(bias["mlmc"])


@pytest.mark.slow
def test_call_calibration():
    model = load_model("call")
    params = calibrate(model.sampler, model.alpha, model.beta, sample_size=100_000, seed=2)
    assert 42.0 <= params.V1 <= 70.0
    assert 745.0 <= params.var_Y0 <= 1010.0


@pytest.mark.slow
def test_barrier_variance():
    model = load_model("barrier")
    assert estimate_var_Y0(model.sampler, sample_size=200_000, seed=2) == pytest.approx(30.3, rel=0.1)


@pytest.mark.slow
def test_nested_reaches_target():
    model = load_model("nested")
    eps = 2.0 ** -3
    plan = make_plan("ml2r", eps, model.params, regime=model.regime)
    stats = replicate(plan, model.sampler, L=64, base_seed=1, reference=model.reference, workers=4)
    assert stats.eps_tilde <= 1.25 * eps


@pytest.mark.slow
def test_nested_calibration():
    model = load_model("nested")
    params = calibrate(model.sampler, model.alpha, model.beta, sample_size=100_000, seed=2)
    assert params.var_Y0 == pytest.approx(9.09, rel=0.25)
    assert params.V1 == pytest.approx(7.20, rel=0.25)
