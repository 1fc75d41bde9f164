"""
plan.py
-------
Optimal estimator parameters from structural parameters.

Pipeline for the multilevel kinds (mlmc, ml2r):
    R  <- optimal_R(epsilon, M)
    h  <- optimal_h(epsilon, R, M)       (h = h_max / n_h, n_h integer)
    q  <- optimal_q(R, refiners, h)      (stratification over the allocation columns)
    N  <- optimal_N(epsilon, R, M, h, q)
and choose_M repeats the pipeline for M = 2..M_max.

crude and multistep plans use a single stratum.

Usage:
    from ml2r.plan import StructuralParams, make_plan
    params = StructuralParams(alpha=1, beta=1, V1=56, var_Y0=876)
    plan = make_plan("ml2r", 2 ** -3, params)
    print(plan.R, plan.M, plan.n_h, plan.N, plan.cost)
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    AllocationMatrix,
    WeightVector,
    allocation_matrix,
    consecutive_refiners,
    geometric_refiners,
    refiner_family,
    solve_weights,
    validate_refiners,
    w_alpha_bound,
)

logger = logging.getLogger(__name__)

KINDS = ("crude", "multistep", "mlmc", "ml2r")
REGIMES = ("sum", "max")
ROUNDINGS = ("nearest", "floor")
M_SELECTIONS = ("coarsest", "cost")
DEFAULT_M_MAX = 10
Q_FLOOR = 1e-12
PLAN_DOCUMENT_VERSION = 1

OVERRIDE_KEYS = {"M", "R", "n_h", "h", "q", "N"}


# === Structural parameters ===

@dataclass(frozen=True)
class StructuralParams:
    """Weak/strong error structure of the family Y_h."""
    alpha: float           # weak error exponent
    beta: float            # strong error exponent
    V1: float              # strong error constant, ||Y_h - Y_0||^2 <= V1 h^beta
    var_Y0: float          # variance of the limit
    h_max: float = 1.0     # coarsest admissible bias parameter
    c1: float = 1.0        # first weak error coefficient
    c_tilde: float = 1.0   # lim |c_R|^(1/R)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.V1 < 0:
            raise ValueError(f"V1 must be >= 0, got {self.V1}")
        if not self.var_Y0 > 0:
            raise ValueError(f"var_Y0 must be > 0, got {self.var_Y0}")
        if not self.h_max > 0:
            raise ValueError(f"h_max must be > 0, got {self.h_max}")
        if not self.c_tilde > 0:
            raise ValueError(f"c_tilde must be > 0, got {self.c_tilde}")

    def theta(self) -> float:
        return math.sqrt(self.V1 / self.var_Y0)

    def consistency_flags(self) -> tuple[str, ...]:
        if self.c1 != 0 and self.beta > 2 * self.alpha:
            return ("beta_gt_2alpha",)
        return ()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "StructuralParams":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"Unknown structural parameter(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class CostRegime:
    """Unit cost of a stratum: sum or max of the refiners it touches."""
    kind: str = "sum"

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ValueError(f"Unknown cost regime '{self.kind}'. Expected one of {REGIMES}")

    def column_cost(self, column: np.ndarray, refiners: Sequence[int]) -> float:
        n = np.asarray(refiners, dtype=float)[np.asarray(column) != 0.0]
        if n.size == 0:
            return 0.0
        return float(n.sum() if self.kind == "sum" else n.max())


def _regime(regime: str | CostRegime) -> CostRegime:
    return regime if isinstance(regime, CostRegime) else CostRegime(regime)


# === Plan ===

@dataclass(frozen=True, eq=False)
class Plan:
    """A fully resolved estimator configuration.

    q holds one entry per active column of `alloc`, in column order.
    M is the geometric root (0 when the refiners are not geometric, 1 for crude).
    """
    kind: str
    params: StructuralParams
    epsilon: float
    R: int
    M: int
    n_h: int
    q: tuple[float, ...]
    N: int
    alloc: AllocationMatrix
    refiners: tuple[int, ...]
    regime: str = "sum"
    rounding: str = "nearest"
    weights: Optional[WeightVector] = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if abs(math.fsum(self.q) - 1.0) > 1e-9:
            raise ValueError(f"Stratification must sum to 1, got {sum(self.q)}")
        if any(qj <= 0 for qj in self.q):
            raise ValueError(f"Stratification entries must be > 0, got {self.q}")
        if len(self.q) != len(self.alloc.active_columns()):
            raise ValueError(f"q has {len(self.q)} entries for {len(self.alloc.active_columns())} strata")
        if self.n_h < 1:
            raise ValueError(f"n_h must be a positive integer, got {self.n_h}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")

    @property
    def h(self) -> float:
        return self.params.h_max / self.n_h

    @property
    def h_inv(self) -> float:
        return self.n_h / self.params.h_max

    @property
    def template(self) -> str:
        return self.alloc.template

    def strata(self) -> list[int]:
        return self.alloc.active_columns()

    def level_costs(self) -> list[float]:
        """Per-sample cost of each stratum in refiner units (b_j)."""
        reg = CostRegime(self.regime)
        return [reg.column_cost(self.alloc.column(j), self.refiners) for j in self.strata()]

    def level_sizes(self) -> list[int]:
        return [math.ceil(qj * self.N) for qj in self.q]

    @property
    def cost(self) -> float:
        """Predicted cost N * sum_j q_j b_j / h."""
        return self.N * math.fsum(qj * bj for qj, bj in zip(self.q, self.level_costs())) / self.h

    def predicted_bias(self) -> float:
        return predicted_bias(self.kind, self.params, self.R, self.refiners, self.h)

    def to_document(self) -> dict:
        """Flat key-value document; floats round-trip through JSON exactly."""
        p = self.params
        doc = {
            "version": PLAN_DOCUMENT_VERSION,
            "kind": self.kind,
            "template": self.template,
            "epsilon": self.epsilon,
            "alpha": p.alpha,
            "beta": p.beta,
            "V1": p.V1,
            "varY0": p.var_Y0,
            "h_max": p.h_max,
            "c1": p.c1,
            "c_tilde": p.c_tilde,
            "R": self.R,
            "M": self.M,
            "h_inv": self.n_h,
            "refiners": list(self.refiners),
            "q": list(self.q),
            "N": self.N,
            "regime": self.regime,
            "rounding": self.rounding,
            "flags": list(self.flags),
        }
        return doc


def plan_from_document(doc: dict) -> Plan:
    """Rebuild a Plan from `Plan.to_document()` output."""
    required = {"kind", "epsilon", "alpha", "beta", "V1", "varY0", "h_max", "c1", "c_tilde",
                "R", "M", "h_inv", "q", "N", "regime", "rounding"}
    missing = required - set(doc)
    if missing:
        raise ValueError(f"Plan document missing field(s): {', '.join(sorted(missing))}")
    params = StructuralParams(alpha=doc["alpha"], beta=doc["beta"], V1=doc["V1"], var_Y0=doc["varY0"],
                              h_max=doc["h_max"], c1=doc["c1"], c_tilde=doc["c_tilde"])
    kind = doc["kind"]
    R = int(doc["R"])
    M = int(doc["M"])
    if "refiners" in doc:
        n = validate_refiners(doc["refiners"])
    else:
        n = (1,) if kind == "crude" else geometric_refiners(M, R)
    template = doc.get("template") or default_template(kind)
    weights = solve_weights(params.alpha, n) if (kind in ("ml2r", "multistep")) else None
    alloc = allocation_matrix(template, R, weights)
    return Plan(kind=kind, params=params, epsilon=doc["epsilon"], R=R, M=M, n_h=int(doc["h_inv"]),
                q=tuple(float(x) for x in doc["q"]), N=int(doc["N"]), alloc=alloc, refiners=n,
                regime=doc["regime"], rounding=doc["rounding"], weights=weights,
                flags=tuple(doc.get("flags", ())))


def default_template(kind: str) -> str:
    return {"crude": "crude", "multistep": "multistep", "mlmc": "mlmc", "ml2r": "ml2r-telescopic"}[kind]


def _check_kind(kind: str):
    if kind not in KINDS:
        raise ValueError(f"Unknown estimator kind '{kind}'. Expected one of {KINDS}")


def _variance_factor(kind: str, alpha: float, R: int) -> float:
    if kind in ("ml2r", "multistep"):
        return 1.0 + 1.0 / (2.0 * alpha * R)
    return 1.0 + 1.0 / (2.0 * alpha)


# === Stratification (optimal q) ===

def stratum_terms(alloc: AllocationMatrix, refiners: Sequence[int], params: StructuralParams,
                  h: float, regime: str | CostRegime = "sum") -> tuple[np.ndarray, np.ndarray]:
    """Effort terms (a_j, b_j) for each active column of the allocation matrix.

    a_j bounds the variance of stratum j in units of var(Y_0):
        base column:  (1 + theta h^(beta/2) s_j)^2
        other columns: (theta h^(beta/2) s_j)^2
    with s_j = sum_i |T_i^j| n_i^(-beta/2); b_j is the unit cost of the stratum.
    """
    reg = _regime(regime)
    n = np.asarray(refiners, dtype=float)
    if len(n) != alloc.R:
        raise ValueError(f"{len(n)} refiners for an allocation matrix of depth {alloc.R}")
    theta_h = params.theta() * h ** (params.beta / 2.0)
    base = alloc.base_column()
    a, b = [], []
    for j in alloc.active_columns():
        col = alloc.column(j)
        s = float(np.sum(np.abs(col) * n ** (-params.beta / 2.0)))
        if j == base:
            a.append((1.0 + theta_h * s) ** 2)
        else:
            a.append((theta_h * s) ** 2)
        b.append(reg.column_cost(col, n))
    return np.asarray(a), np.asarray(b)


def _normalise_q(raw: np.ndarray) -> tuple[float, ...]:
    raw = np.maximum(np.asarray(raw, dtype=float), Q_FLOOR)
    return tuple(float(x) for x in raw / raw.sum())


def _alloc_for(kind: str, R: int, weights: Optional[WeightVector], template: Optional[str]) -> AllocationMatrix:
    template = template or default_template(kind)
    return allocation_matrix(template, R, weights)


def optimal_q(kind: str, params: StructuralParams, R: int, refiners: Sequence[int],
              weights: Optional[WeightVector], h: float, regime: str | CostRegime = "sum",
              template: Optional[str] = None) -> tuple[float, ...]:
    """Optimal stratification q_j proportional to sqrt(a_j / b_j).

    For the telescopic templates this is
        q_1 ~ 1 + theta h^(beta/2)
        q_j ~ theta h^(beta/2) |W_j| (n_{j-1}^(-beta/2) + n_j^(-beta/2)) / sqrt(n_{j-1} + n_j)
    (|W_j| = 1 for mlmc). crude and multistep collapse to a single stratum.
    """
    _check_kind(kind)
    if R < 1:
        raise ValueError(f"Depth R must be >= 1, got {R}")
    if not 0 < h <= params.h_max * (1 + 1e-12):
        raise ValueError(f"h must lie in (0, h_max={params.h_max}], got {h}")
    if kind in ("crude", "multistep"):
        return (1.0,)
    alloc = _alloc_for(kind, R, weights, template)
    a, b = stratum_terms(alloc, refiners, params, h, regime)
    return _normalise_q(np.sqrt(a / b))


def effort_bound(alloc: AllocationMatrix, refiners: Sequence[int], params: StructuralParams,
                 h: float, q: Sequence[float], regime: str | CostRegime = "sum") -> float:
    """Upper bound of the effort: var/h * (sum_j a_j / q_j) * (sum_j q_j b_j)."""
    a, b = stratum_terms(alloc, refiners, params, h, regime)
    q = np.asarray(q, dtype=float)
    return params.var_Y0 / h * float(np.sum(a / q)) * float(np.sum(q * b))


# === Depth R ===

def _A(kind: str, alpha: float) -> float:
    return math.sqrt(1.0 + 4.0 * alpha) if kind == "ml2r" else math.sqrt(1.0 + 2.0 * alpha)


def optimal_R_continuous(kind: str, epsilon: float, params: StructuralParams, M: int) -> float:
    """Unrounded optimal depth; nan when the formula is degenerate."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    alpha, log_m = params.alpha, math.log(M)
    A = _A(kind, alpha)
    if kind == "ml2r":
        x = 0.5 + math.log(params.c_tilde ** (1.0 / alpha) * params.h_max) / log_m
        radicand = x * x + 2.0 * math.log(A / epsilon) / (alpha * log_m)
        if radicand < 0:
            return float("nan")
        return x + math.sqrt(radicand)
    if kind == "mlmc":
        if params.c1 == 0:
            raise ValueError("mlmc depth needs c1 != 0")
        return (1.0 + math.log(abs(params.c1) ** (1.0 / alpha) * params.h_max) / log_m
                + math.log(A / epsilon) / (alpha * log_m))
    raise ValueError(f"optimal_R applies to mlmc and ml2r, got '{kind}'")


def _round(x: float, rounding: str) -> int:
    if rounding not in ROUNDINGS:
        raise ValueError(f"Unknown rounding '{rounding}'. Expected one of {ROUNDINGS}")
    return math.floor(x + 0.5) if rounding == "nearest" else math.floor(x)


def optimal_R(kind: str, epsilon: float, params: StructuralParams, M: int, rounding: str = "nearest") -> int:
    """Optimal depth, clamped to R >= 2."""
    R, _ = _optimal_R_flagged(kind, epsilon, params, M, rounding)
    return R


def _optimal_R_flagged(kind, epsilon, params, M, rounding) -> tuple[int, tuple[str, ...]]:
    flags = []
    if epsilon >= _A(kind, params.alpha):
        flags.append("eps_degenerate")
    raw = optimal_R_continuous(kind, epsilon, params, M)
    R = 0 if math.isnan(raw) else _round(raw, rounding)
    if R < 2:
        R = 2
        flags.append("R_clamped")
    if flags:
        logger.warning("Depth clamped to R=%d for %s at epsilon=%g, M=%d (%s)", R, kind, epsilon, M, ", ".join(flags))
    return R, tuple(flags)


# === Bias parameter h ===

def _discretize_h(h_star: float, h_max: float) -> tuple[float, int]:
    ratio = h_max / h_star
    n_h = max(1, math.ceil(ratio * (1.0 - 1e-12)))
    return h_max / n_h, n_h


def optimal_h_continuous(kind: str, epsilon: float, params: StructuralParams, R: int, M: int = 2,
                         refiners: Optional[Sequence[int]] = None) -> float:
    alpha = params.alpha
    if kind == "ml2r":
        aR = alpha * R
        return ((1.0 + 2.0 * aR) ** (-1.0 / (2.0 * aR)) * (epsilon / params.c_tilde ** R) ** (1.0 / aR)
                * M ** ((R - 1) / 2.0))
    if kind in ("mlmc", "crude"):
        if params.c1 == 0:
            raise ValueError(f"{kind} bias parameter needs c1 != 0 (supply the first nonzero order instead)")
        h = (1.0 + 2.0 * alpha) ** (-1.0 / (2.0 * alpha)) * (epsilon / abs(params.c1)) ** (1.0 / alpha)
        return h * M ** (R - 1) if kind == "mlmc" else h
    if kind == "multistep":
        n = validate_refiners(refiners) if refiners is not None else consecutive_refiners(R)
        R = len(n)
        aR = alpha * R
        log_nfact = sum(math.log(x) for x in n)
        return ((1.0 + 2.0 * aR) ** (-1.0 / (2.0 * aR)) * (epsilon / params.c_tilde ** R) ** (1.0 / aR)
                * math.exp(log_nfact / R))
    raise ValueError(f"Unknown estimator kind '{kind}'")


def optimal_h(kind: str, epsilon: float, params: StructuralParams, R: int, M: int = 2,
              refiners: Optional[Sequence[int]] = None) -> tuple[float, int]:
    """Bias parameter on the admissible grid: n_h = ceil(h_max / h*), h = h_max / n_h."""
    _check_kind(kind)
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    return _discretize_h(optimal_h_continuous(kind, epsilon, params, R, M, refiners), params.h_max)


# === Sample size N ===

def optimal_N(kind: str, epsilon: float, params: StructuralParams, R: int, M: int, h: float,
              q: Sequence[float], weights: Optional[WeightVector] = None, regime: str | CostRegime = "sum",
              refiners: Optional[Sequence[int]] = None, template: Optional[str] = None) -> int:
    """Total sample budget.

    N = ceil(f * var(Y_0) * (sum_j sqrt(a_j b_j))^2 / (epsilon^2 * sum_j q_j b_j))
    with f = 1 + 1/(2 alpha R) (ml2r, multistep) or 1 + 1/(2 alpha) (mlmc, crude).
    On the telescopic templates sum_j sqrt(a_j b_j) = 1 + theta h^(beta/2) S.
    """
    _check_kind(kind)
    if refiners is None:
        refiners = (1,) if kind == "crude" else geometric_refiners(M, R)
    R = len(refiners)
    if kind in ("ml2r", "multistep") and weights is None:
        weights = solve_weights(params.alpha, refiners)
    alloc = _alloc_for(kind, R, weights, template)
    a, b = stratum_terms(alloc, refiners, params, h, regime)
    q = np.asarray(q, dtype=float)
    numerator = _variance_factor(kind, params.alpha, R) * params.var_Y0 * float(np.sum(np.sqrt(a * b))) ** 2
    value = numerator / (epsilon ** 2 * float(np.sum(q * b)))
    return max(1, math.ceil(value * (1.0 - 1e-12)))


# === Plans ===

def _build(kind: str, epsilon: float, params: StructuralParams, R: int, M: int, n_h: int,
           refiners: tuple[int, ...], regime: str, rounding: str, template: Optional[str],
           q: Optional[Sequence[float]] = None, N: Optional[int] = None,
           flags: tuple[str, ...] = ()) -> Plan:
    weights = solve_weights(params.alpha, refiners) if kind in ("ml2r", "multistep") else None
    alloc = _alloc_for(kind, len(refiners), weights, template)
    h = params.h_max / n_h
    if q is None:
        q = optimal_q(kind, params, len(refiners), refiners, weights, h, regime, template)
    else:
        q = tuple(float(x) for x in q)
    if N is None:
        N = optimal_N(kind, epsilon, params, len(refiners), M, h, q, weights, regime, refiners, template)
    return Plan(kind=kind, params=params, epsilon=epsilon, R=len(refiners), M=M, n_h=n_h, q=tuple(q),
                N=int(N), alloc=alloc, refiners=refiners, regime=regime, rounding=rounding,
                weights=weights, flags=tuple(dict.fromkeys(flags + params.consistency_flags())))


def crude_plan(epsilon: float, params: StructuralParams, regime: str = "sum") -> Plan:
    """Plain Monte Carlo at h*(eps) = (1+2a)^(-1/(2a)) (eps/|c1|)^(1/a)."""
    _, n_h = optimal_h("crude", epsilon, params, 1)
    return _build("crude", epsilon, params, 1, 1, n_h, (1,), regime, "nearest", None)


def multistep_plan(epsilon: float, params: StructuralParams, refiners: Sequence[int],
                   regime: str = "sum") -> Plan:
    """Multistep Richardson-Romberg: one stratum combining all refiners with the weights."""
    n = validate_refiners(refiners)
    _, n_h = optimal_h("multistep", epsilon, params, len(n), refiners=n)
    family, root = refiner_family(n)
    return _build("multistep", epsilon, params, len(n), root or 0, n_h, n, regime, "nearest", None)


def _multilevel_plan(kind: str, epsilon: float, params: StructuralParams, M: int, regime: str,
                     rounding: str, template: Optional[str], overrides: dict) -> Plan:
    flags: tuple[str, ...] = ()
    if "R" in overrides:
        R = int(overrides["R"])
        if R < 1:
            raise ValueError(f"Override R must be >= 1, got {R}")
    else:
        R, flags = _optimal_R_flagged(kind, epsilon, params, M, rounding)
    if "n_h" in overrides or "h" in overrides:
        n_h = _override_n_h(overrides, params)
    else:
        _, n_h = optimal_h(kind, epsilon, params, R, M)
    q = overrides.get("q")
    if q is not None and len(q) != R:
        raise ValueError(f"Override q has {len(q)} entries, expected {R}")
    return _build(kind, epsilon, params, R, M, n_h, geometric_refiners(M, R), regime, rounding,
                  template, q=q, N=overrides.get("N"), flags=flags)


def _override_n_h(overrides: dict, params: StructuralParams) -> int:
    if "n_h" in overrides:
        n_h = int(overrides["n_h"])
    else:
        ratio = params.h_max / float(overrides["h"])
        n_h = round(ratio)
        if abs(ratio - n_h) > 1e-9 * ratio:
            raise ValueError(f"Override h={overrides['h']} is not h_max/n for an integer n")
    if n_h < 1:
        raise ValueError(f"Override h must not exceed h_max, got n_h={n_h}")
    return n_h


def _selection_key(plan: Plan, selection: str) -> tuple:
    if selection == "coarsest":
        return (plan.n_h, plan.cost)
    return (plan.cost,)


def search_M(kind: str, epsilon: float, params: StructuralParams, regime: str = "sum",
             M_max: int = DEFAULT_M_MAX, rounding: str = "nearest", template: Optional[str] = None,
             overrides: Optional[dict] = None) -> list[Plan]:
    """Candidate plans for M = 2..M_max."""
    if M_max < 2:
        raise ValueError(f"M_max must be >= 2, got {M_max}")
    overrides = overrides or {}
    candidates = []
    for M in range(2, M_max + 1):
        plan = _multilevel_plan(kind, epsilon, params, M, regime, rounding, template, overrides)
        logger.debug("%s eps=%g M=%d: R=%d n_h=%d N=%d cost=%.4g", kind, epsilon, M, plan.R, plan.n_h,
                     plan.N, plan.cost)
        candidates.append(plan)
    return candidates


def choose_M(kind: str, epsilon: float, params: StructuralParams, regime: str = "sum",
             M_max: int = DEFAULT_M_MAX, rounding: str = "nearest", selection: str = "coarsest",
             template: Optional[str] = None) -> int:
    """Best refiner root in 2..M_max.

    selection="cost" minimises the predicted cost. selection="coarsest" first
    keeps the bias parameter on the coarsest reachable grid (smallest n_h) and
    minimises cost among those roots. Ties go to the smaller M.
    """
    return _best_plan(search_M(kind, epsilon, params, regime, M_max, rounding, template), selection).M


def _best_plan(candidates: list[Plan], selection: str) -> Plan:
    if selection not in M_SELECTIONS:
        raise ValueError(f"Unknown M selection '{selection}'. Expected one of {M_SELECTIONS}")
    best = candidates[0]
    for plan in candidates[1:]:
        if _selection_key(plan, selection) < _selection_key(best, selection):
            best = plan
    return best


def make_plan(kind: str, epsilon: float, params: StructuralParams, regime: str = "sum",
              overrides: Optional[dict] = None, *, M_max: int = DEFAULT_M_MAX, rounding: str = "nearest",
              m_selection: str = "coarsest", template: Optional[str] = None,
              refiners: Optional[Sequence[int]] = None) -> Plan:
    """Resolve a complete Plan.

    Args:
        kind: crude, multistep, mlmc or ml2r
        epsilon: target RMSE
        params: structural parameters
        regime: "sum" or "max" unit cost
        overrides: pin any of M, R, n_h (or h), q, N
        M_max: upper end of the root search
        rounding: "nearest" or "floor" for R
        m_selection: "coarsest" or "cost"
        template: allocation template for ml2r (telescopic by default)
        refiners: explicit refiners for multistep (consecutive by default)

    Returns:
        Plan, deterministic in its inputs.
    """
    _check_kind(kind)
    CostRegime(regime)
    _round(1.0, rounding)
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - OVERRIDE_KEYS
    if unknown:
        raise ValueError(f"Unknown override(s): {', '.join(sorted(unknown))}")
    if template is not None and kind != "ml2r" and template != default_template(kind):
        raise ValueError(f"Template '{template}' does not apply to kind '{kind}'")

    if kind == "crude":
        plan = crude_plan(epsilon, params, regime)
        return _apply_single_stratum_overrides(plan, overrides)
    if kind == "multistep":
        if refiners is None:
            R = int(overrides.get("R") or optimal_R("ml2r", epsilon, params, 2, rounding))
            if "M" in overrides:
                refiners = geometric_refiners(int(overrides["M"]), R)
            else:
                refiners = consecutive_refiners(R)
        plan = multistep_plan(epsilon, params, refiners, regime)
        return _apply_single_stratum_overrides(plan, overrides)

    if "M" in overrides:
        M = int(overrides["M"])
        if M < 2:
            raise ValueError(f"Override M must be >= 2, got {M}")
        plan = _multilevel_plan(kind, epsilon, params, M, regime, rounding, template, overrides)
    else:
        plan = _best_plan(search_M(kind, epsilon, params, regime, M_max, rounding, template, overrides),
                          m_selection)
    logger.info("%s eps=%g: R=%d M=%d h_inv=%d N=%d cost=%.4g", kind, epsilon, plan.R, plan.M,
                plan.n_h, plan.N, plan.cost)
    return plan


def _apply_single_stratum_overrides(plan: Plan, overrides: dict) -> Plan:
    if not overrides.keys() - {"R", "M"}:
        return plan
    n_h = _override_n_h(overrides, plan.params) if ("n_h" in overrides or "h" in overrides) else plan.n_h
    if "q" in overrides and tuple(overrides["q"]) != (1.0,):
        raise ValueError(f"{plan.kind} has a single stratum; q must be (1.0,)")
    weights = plan.weights
    N = overrides.get("N")
    if N is None:
        N = optimal_N(plan.kind, plan.epsilon, plan.params, plan.R, plan.M, plan.params.h_max / n_h,
                      plan.q, weights, plan.regime, plan.refiners)
    return replace(plan, n_h=n_h, N=int(N))


# === Bias model and asymptotics ===

def predicted_bias(kind: str, params: StructuralParams, R: int, refiners: Sequence[int], h: float) -> float:
    """Leading term of the bias expansion."""
    alpha = params.alpha
    if kind in ("crude",):
        return params.c1 * h ** alpha
    if kind == "mlmc":
        return params.c1 * (h / refiners[-1]) ** alpha
    w = solve_weights(alpha, refiners)
    return params.c_tilde ** R * h ** (alpha * R) * abs(w.wtilde)


def v_rate(kind: str, beta: float, epsilon: float, alpha: float = 1.0, M: int = 2) -> float:
    """Renormalisation v(beta, eps) of the asymptotic cost."""
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    log_inv = math.log(1.0 / epsilon)
    if kind == "ml2r":
        if beta == 1:
            return epsilon ** 2 / log_inv
        if beta > 1:
            return epsilon ** 2
        return epsilon ** 2 * math.exp(-(1.0 - beta) / math.sqrt(alpha) * math.sqrt(2.0 * log_inv * math.log(M)))
    if kind == "mlmc":
        if beta == 1:
            return epsilon ** 2 / log_inv ** 2
        if beta > 1:
            return epsilon ** 2
        return epsilon ** (2.0 + (1.0 - beta) / alpha)
    raise ValueError(f"v_rate applies to mlmc and ml2r, got '{kind}'")


def K_constant(kind: str, params: StructuralParams, M: int) -> float:
    """Asymptotic cost constant K(alpha, beta, M)."""
    alpha, beta, V1, var, hm = params.alpha, params.beta, params.V1, params.var_Y0, params.h_max
    theta = params.theta()
    W = w_alpha_bound(alpha, M) if kind == "ml2r" else 1.0
    log_m = math.log(M)
    if kind == "ml2r":
        if beta == 1:
            return 2.0 * V1 / alpha * (W * M * (1 + M) * (1 + M ** -0.5) ** 2 / log_m)
        if beta > 1:
            inner = W * M ** ((beta - 1) / 2) * math.sqrt(1 + M) * (1 + M ** (-beta / 2)) / (1 - M ** ((1 - beta) / 2))
            return var * M / hm * (1 + theta * hm ** (beta / 2) * inner) ** 2
        return (V1 * hm ** (1 - beta) * params.c_tilde ** ((1 - beta) / alpha)
                * W ** 2 * M * (1 + M) * (1 + M ** (-beta / 2)) ** 2 / (M ** ((1 - beta) / 2) - 1) ** 2)
    if kind == "mlmc":
        fac = 1 + 1 / (2 * alpha)
        if beta == 1:
            return fac * V1 / alpha ** 2 * (M * (1 + M) * (1 + M ** -0.5) ** 2 / log_m ** 2)
        if beta > 1:
            inner = M ** ((beta - 1) / 2) * math.sqrt(1 + M) * (1 + M ** (-beta / 2)) / (1 - M ** ((1 - beta) / 2))
            return fac * var * M / hm * (1 + theta * hm ** (beta / 2) * inner) ** 2
        return ((1 + 2 * alpha) ** (1 + (1 - beta) / (2 * alpha)) / (2 * alpha) * V1 * hm ** (1 - beta)
                * abs(params.c1) ** ((1 - beta) / alpha)
                * M * (1 + M) * (1 + M ** (-beta / 2)) ** 2 / (M ** ((1 - beta) / 2) - 1) ** 2)
    raise ValueError(f"K_constant applies to mlmc and ml2r, got '{kind}'")


@dataclass(frozen=True)
class CostCurve:
    """Asymptotic cost K / v(beta, eps) for one kind and root."""
    kind: str
    params: StructuralParams
    M: int
    K: float

    def v_rate(self, epsilon: float) -> float:
        return v_rate(self.kind, self.params.beta, epsilon, self.params.alpha, self.M)

    def cost(self, epsilon: float) -> float:
        return self.K / self.v_rate(epsilon)


def theoretical_cost_curve(kind: str, params: StructuralParams, M: int) -> CostCurve:
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    return CostCurve(kind=kind, params=params, M=M, K=K_constant(kind, params, M))


@dataclass(frozen=True)
class ChiDiagnostic:
    kappa1: float
    kappa2: float
    chi_opt: float
    K_opt: float


def chi_opt_diagnostic(params: StructuralParams, M: int, chi: Optional[float] = None) -> ChiDiagnostic:
    """Optimal upper bias parameter for beta > 1 (ml2r)."""
    beta = params.beta
    if beta <= 1:
        raise ValueError(f"chi_opt is defined for beta > 1, got {beta}")
    chi = params.h_max if chi is None else chi
    W = w_alpha_bound(params.alpha, M)
    kappa1 = params.var_Y0 * M / chi
    kappa2 = (params.theta() ** 2 * W ** 2 * M ** (beta - 1) * (1 + M) * (1 + M ** -beta)
              / (1 - M ** ((1 - beta) / 2)) ** 2)
    chi_opt = beta ** (-2 / (beta + 1)) * kappa2 ** (-1 / (beta + 1))
    K_opt = (beta + 1) ** 2 * beta ** (-2 / (beta + 1)) * kappa1 * kappa2 ** (1 / (beta + 1))
    return ChiDiagnostic(kappa1=kappa1, kappa2=kappa2, chi_opt=chi_opt, K_opt=K_opt)
