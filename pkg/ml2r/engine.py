"""
engine.py
---------
Execute a Plan against a level sampler.

Each stratum (active column j of the allocation matrix) averages N_j draws of
    sum_i T_ij Y_{h/n_i}
where the Y's of one draw share their randomness. Draws are cut into chunks of
CHUNK_SIZE; chunk c of stratum j in replication r reads the stream keyed by
(seed, r, j, c). Chunk statistics are merged in index order, so results are
bit-identical for any number of workers.

Usage:
    from ml2r.engine import run, replicate
    result = run(plan, model.sampler, seed=7)
    stats = replicate(plan, model.sampler, L=256, base_seed=7, reference=model.reference)
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._common import ML2RError
from .models import LevelSampler
from .plan import Plan, StructuralParams
from .rng import CHUNK_SIZE, Stream, StreamKey, chunk_bounds

logger = logging.getLogger(__name__)

V1_LEVEL = 0     # stream level used by estimate_V1
VAR_LEVEL = 1    # stream level used by estimate_var_Y0


class LevelSizeError(ML2RError, ValueError):
    """A level has fewer than two samples, so its variance is undefined."""


# === Results ===

@dataclass(frozen=True)
class RunResult:
    estimate: float
    nu_bar: float                 # empirical variance of the estimate
    level_sizes: tuple[int, ...]  # N_j per active stratum
    cost_units: float             # sum_j N_j b_j / h, in units of 1/h_max
    wall_time: float              # seconds spent sampling
    seed: int
    replication: int = 0
    level_means: tuple[float, ...] = ()
    level_variances: tuple[float, ...] = ()
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ReplicationStats:
    L: int
    mu_tilde: Optional[float]     # empirical bias against the reference, None without one
    nu_tilde: float               # mean of nu_bar over the runs
    eps_tilde: float              # sqrt(mu_tilde^2 + nu_tilde)
    mean_estimate: float
    estimates: tuple[float, ...] = field(repr=False, default=())
    mean_time: float = 0.0
    mean_cost: float = 0.0
    flags: tuple[str, ...] = ()

    @property
    def empirical_variance(self) -> float:
        """Sample variance of the L estimates."""
        return float(np.var(self.estimates, ddof=1)) if len(self.estimates) > 1 else 0.0


# === Moment accumulation ===

@dataclass
class Moments:
    """Running (count, mean, M2) with a pairwise merge."""
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values: np.ndarray) -> "Moments":
        if values.size == 0:
            return cls()
        mean = float(values.mean())
        return cls(count=int(values.size), mean=mean, m2=float(((values - mean) ** 2).sum()))

    def merge(self, other: "Moments") -> "Moments":
        if other.count == 0:
            return Moments(self.count, self.mean, self.m2)
        if self.count == 0:
            return Moments(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return Moments(n, mean, m2)

    @property
    def variance(self) -> float:
        if self.count < 2:
            raise LevelSizeError(f"Variance needs at least 2 samples, got {self.count}")
        return self.m2 / (self.count - 1)


def unitary_variance(moments: list[Moments]) -> float:
    """nu_bar = sum_j M2_j / (N_j (N_j - 1))."""
    return math.fsum(m.variance / m.count for m in moments)


# === Stratum sampling ===

@dataclass(frozen=True)
class _Stratum:
    column: int
    rows: tuple[int, ...]          # refiner indices with a nonzero entry
    refiners: tuple[int, ...]
    coefs: tuple[float, ...]
    size: int


def _strata(plan: Plan, sizes: list[int]) -> list[_Stratum]:
    out = []
    for j, n_j in zip(plan.strata(), sizes):
        col = plan.alloc.column(j)
        rows = tuple(int(i) for i in np.flatnonzero(col))
        out.append(_Stratum(column=j, rows=rows, refiners=tuple(plan.refiners[i] for i in rows),
                            coefs=tuple(float(col[i]) for i in rows), size=n_j))
    return out


def stratum_draws(sampler: LevelSampler, h: float, stratum: _Stratum, stream: Stream, size: int) -> np.ndarray:
    """`size` draws of sum_i T_ij Y_{h/n_i} for one stratum."""
    n = stratum.refiners
    if len(n) == 1 and n[0] == 1:
        return stratum.coefs[0] * sampler.sample_base(h, stream, size)
    if len(n) == 2:
        coarse, fine = sampler.sample_pair(h, n[0], n[1], stream, size)
        return stratum.coefs[0] * coarse + stratum.coefs[1] * fine
    joint = sampler.sample_joint(h, n, stream, size)
    return joint @ np.asarray(stratum.coefs)


def _chunk_task(sampler, h, key: StreamKey, stratum: _Stratum, size: int) -> Moments:
    return Moments.of(stratum_draws(sampler, h, stratum, Stream(key), size))


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _level_sizes(plan: Plan) -> tuple[list[int], tuple[str, ...]]:
    sizes = plan.level_sizes()
    if any(s < 2 for s in sizes):
        logger.warning("Promoting level sizes %s to at least 2", sizes)
        return [max(s, 2) for s in sizes], ("N_promoted",)
    return sizes, ()


# === Operations ===

def run(plan: Plan, sampler: LevelSampler, seed: int, replication: int = 0, workers: int = 1,
        chunk_size: int = CHUNK_SIZE) -> RunResult:
    """One realisation of the estimator described by `plan`."""
    sizes, flags = _level_sizes(plan)
    strata = _strata(plan, sizes)
    h = plan.h
    base = StreamKey(seed, replication)
    tasks = [(pos, base.with_(level=s.column, chunk=c), s, size)
             for pos, s in enumerate(strata)
             for c, size in chunk_bounds(s.size, chunk_size)]

    start = time.perf_counter()
    partials = _map(lambda t: (t[0], _chunk_task(sampler, h, t[1], t[2], t[3])), tasks, workers)
    wall_time = time.perf_counter() - start

    moments = [Moments() for _ in strata]
    for pos, m in partials:
        moments[pos] = moments[pos].merge(m)

    b = plan.level_costs()
    cost_units = math.fsum(n_j * b_j for n_j, b_j in zip(sizes, b)) * plan.n_h
    result = RunResult(
        estimate=math.fsum(m.mean for m in moments),
        nu_bar=unitary_variance(moments),
        level_sizes=tuple(sizes),
        cost_units=cost_units,
        wall_time=wall_time,
        seed=seed,
        replication=replication,
        level_means=tuple(m.mean for m in moments),
        level_variances=tuple(m.variance for m in moments),
        flags=flags,
    )
    for j, (m_j, v_j, n_j) in enumerate(zip(result.level_means, result.level_variances, sizes)):
        logger.debug("stratum %d: N=%d mean=%.6g var=%.6g", j, n_j, m_j, v_j)
    return result


def replicate(plan: Plan, sampler: LevelSampler, L: int, base_seed: int, reference: Optional[float] = None,
              workers: int = 1) -> ReplicationStats:
    """L independent runs (replication index 0..L-1) and their empirical error."""
    if L < 2:
        raise ValueError(f"Replication count L must be >= 2, got {L}")
    results = _map(lambda r: run(plan, sampler, base_seed, replication=r), list(range(L)), workers)
    estimates = tuple(r.estimate for r in results)
    mean_estimate = math.fsum(estimates) / L
    nu_tilde = math.fsum(r.nu_bar for r in results) / L
    mu_tilde = mean_estimate - reference if reference is not None else None
    eps_tilde = math.sqrt((mu_tilde or 0.0) ** 2 + nu_tilde)
    flags = tuple(sorted({f for r in results for f in r.flags}))
    stats = ReplicationStats(
        L=L,
        mu_tilde=mu_tilde,
        nu_tilde=nu_tilde,
        eps_tilde=eps_tilde,
        mean_estimate=mean_estimate,
        estimates=estimates,
        mean_time=math.fsum(r.wall_time for r in results) / L,
        mean_cost=math.fsum(r.cost_units for r in results) / L,
        flags=flags,
    )
    logger.info("%s eps=%g L=%d: mean=%.6g eps_tilde=%.4g time=%.3gs", plan.kind, plan.epsilon, L,
                mean_estimate, eps_tilde, stats.mean_time)
    return stats


def expected_estimate(plan: Plan, mean_fn: Callable[[float], float]) -> float:
    """Exact expectation sum_i (sum_j T_ij) E Y_{h/n_i} for a sampler with known means."""
    rows = plan.alloc.row_sums()
    return math.fsum(float(rows[i]) * mean_fn(plan.h / n) for i, n in enumerate(plan.refiners))


# === Calibration ===

def _sampled_moments(draw: Callable[[Stream, int], np.ndarray], key: StreamKey, sample_size: int,
                     workers: int) -> Moments:
    bounds = chunk_bounds(sample_size)
    parts = _map(lambda cb: Moments.of(draw(Stream(key.with_(chunk=cb[0])), cb[1])), bounds, workers)
    total = Moments()
    for m in parts:
        total = total.merge(m)
    return total


def _check_sample_size(sample_size: int):
    if sample_size < 1000:
        raise ValueError(f"Calibration sample_size must be >= 1000, got {sample_size}")


def estimate_V1(sampler: LevelSampler, h: float = 1.0, M_probe: int = 10, beta: float = 1.0,
                sample_size: int = 100_000, seed: int = 0, workers: int = 1) -> float:
    """(1 + M^(-beta/2))^(-2) h^(-beta) E (Y_h - Y_{h/M})^2 with M = M_probe."""
    _check_sample_size(sample_size)

    def draw(stream, size):
        coarse, fine = sampler.sample_pair(h, 1, M_probe, stream, size)
        return (coarse - fine) ** 2

    m = _sampled_moments(draw, StreamKey(seed, level=V1_LEVEL), sample_size, workers)
    value = m.mean / ((1.0 + M_probe ** (-beta / 2.0)) ** 2 * h ** beta)
    logger.info("V1 estimate at h=%g, M=%d: %.6g (n=%d)", h, M_probe, value, m.count)
    return value


def estimate_var_Y0(sampler: LevelSampler, h: Optional[float] = None, sample_size: int = 100_000,
                    seed: int = 0, workers: int = 1) -> float:
    """Unbiased sample variance of Y_h; h defaults to the sampler's coarsest step."""
    _check_sample_size(sample_size)
    h = sampler.h_max if h is None else h
    m = _sampled_moments(lambda stream, size: sampler.sample_base(h, stream, size),
                         StreamKey(seed, level=VAR_LEVEL), sample_size, workers)
    logger.info("var(Y) estimate at h=%g: %.6g (n=%d)", h, m.variance, m.count)
    return m.variance


def calibrate(sampler: LevelSampler, alpha: float, beta: float, sample_size: int = 100_000, seed: int = 0,
              M_probe: int = 10, workers: int = 1) -> StructuralParams:
    """Structural parameters with V1 and var(Y_0) estimated at the coarsest step."""
    h = sampler.h_max
    V1 = estimate_V1(sampler, h, M_probe, beta, sample_size, seed, workers)
    var = estimate_var_Y0(sampler, h, sample_size, seed, workers)
    return StructuralParams(alpha=alpha, beta=beta, V1=V1, var_Y0=var, h_max=h)
