"""
core.py
-------
Extrapolation weights, refiner schemes and allocation matrices.

The weights solve the Vandermonde system  sum_i w_i / n_i^(alpha k) = delta_k0,
k = 0..R-1, and are always built from closed-form products (geometric and
consecutive refiners have their own specialised forms). The dense solve is
kept only as an oracle for tests and diagnostics.

Usage:
    from ml2r.core import RefinerScheme, solve_weights, allocation_matrix
    w = solve_weights(1.0, RefinerScheme("geometric", R=3, M=4).refiners())
    T = allocation_matrix("ml2r-telescopic", 3, w)
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._common import ML2RError

logger = logging.getLogger(__name__)

REFINER_KINDS = ("consecutive", "geometric", "explicit")
TEMPLATES = (
    "crude",
    "multistep",
    "mlmc",
    "ml2r-telescopic",
    "ml2r-first-column",
    "ml2r-lower-triangular",
)
ML2R_TEMPLATES = ("ml2r-telescopic", "ml2r-first-column", "ml2r-lower-triangular")

SERIES_TERMS = 64          # truncation of the pi_{alpha,M} product and W_alpha(M) series
LOG_DOMAIN_THRESHOLD = 300.0
_EXP_MAX = 709.0           # log of the largest finite double (rounded down)
_EXP_MIN = -745.0          # log of the smallest subnormal double


class WeightOverflowError(ML2RError, OverflowError):
    """Weights or products of n_i^alpha fall outside the double range."""


class DegenerateWeightsError(ML2RError, ValueError):
    """A normalising denominator vanished."""


# === Refiners ===

def validate_refiners(refiners: Iterable[int]) -> tuple[int, ...]:
    values = list(refiners)
    if not values:
        raise ValueError("Refiner list must not be empty")
    if any(float(x) != int(x) for x in values):
        raise ValueError(f"Refiners must be integers, got {values}")
    n = tuple(int(x) for x in values)
    if n[0] != 1:
        raise ValueError(f"Refiners must start at 1, got {list(n)}")
    if any(b <= a for a, b in zip(n, n[1:])):
        raise ValueError(f"Refiners must be strictly increasing, got {list(n)}")
    return n


@dataclass(frozen=True)
class RefinerScheme:
    """Refiner family n_1 = 1 < n_2 < ... < n_R."""
    kind: str = "geometric"
    R: int = 1
    M: int = 2                       # root, geometric kind only
    explicit: tuple[int, ...] = ()   # explicit kind only

    def __post_init__(self):
        if self.kind not in REFINER_KINDS:
            raise ValueError(f"Unknown refiner kind '{self.kind}'. Expected one of {REFINER_KINDS}")
        if self.kind == "explicit":
            n = validate_refiners(self.explicit)
            object.__setattr__(self, "explicit", n)
            object.__setattr__(self, "R", len(n))
            return
        if int(self.R) != self.R or self.R < 1:
            raise ValueError(f"Depth R must be an integer >= 1, got {self.R}")
        if self.kind == "geometric" and (int(self.M) != self.M or self.M < 2):
            raise ValueError(f"Geometric root M must be an integer >= 2, got {self.M}")

    def refiners(self) -> tuple[int, ...]:
        return refiners(self)


def refiners(scheme: RefinerScheme) -> tuple[int, ...]:
    """Expand a scheme into its refiner tuple."""
    if scheme.kind == "geometric":
        return geometric_refiners(scheme.M, scheme.R)
    if scheme.kind == "consecutive":
        return consecutive_refiners(scheme.R)
    return scheme.explicit


def geometric_refiners(M: int, R: int) -> tuple[int, ...]:
    if M < 2:
        raise ValueError(f"Geometric root M must be >= 2, got {M}")
    return tuple(int(M) ** i for i in range(int(R)))


def consecutive_refiners(R: int) -> tuple[int, ...]:
    return tuple(range(1, int(R) + 1))


def refiner_family(n: Sequence[int]) -> tuple[str, Optional[int]]:
    """Detect ('geometric', M), ('consecutive', None) or ('explicit', None)."""
    n = tuple(n)
    if len(n) >= 2 and n[1] >= 2 and all(n[i] == n[1] ** i for i in range(len(n))):
        return "geometric", n[1]
    if n == tuple(range(1, len(n) + 1)):
        return "consecutive", None
    return "explicit", None


# === Weights ===

@dataclass(frozen=True)
class WeightVector:
    """Extrapolation weights w for refiners n at weak-error exponent alpha."""
    alpha: float
    refiners: tuple[int, ...]
    w: tuple[float, ...]
    wtilde: float  # sum_i w_i / n_i^(alpha R)

    @property
    def R(self) -> int:
        return len(self.w)

    def cumulative(self) -> tuple[float, ...]:
        return cumulative_weights(self)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=float)


def _log_abs_one_minus(log_ratio: float) -> float:
    """log|1 - exp(log_ratio)| without forming the power."""
    if log_ratio > 0:
        return log_ratio + math.log1p(-math.exp(-log_ratio))
    return math.log1p(-math.exp(log_ratio))


def _weights_log_domain(alpha: float, n: tuple[int, ...]) -> list[float]:
    R = len(n)
    logs = [math.log(x) for x in n]
    out = []
    for i in range(R):
        log_abs = 0.0
        for j in range(R):
            if j != i:
                log_abs -= _log_abs_one_minus(alpha * (logs[j] - logs[i]))
        if log_abs > _EXP_MAX or log_abs < _EXP_MIN:
            raise WeightOverflowError(
                f"Weight w_{i + 1} for alpha={alpha}, refiners={list(n)} is not representable (log|w|={log_abs:.1f})"
            )
        sign = -1.0 if (R - 1 - i) % 2 else 1.0
        out.append(sign * math.exp(log_abs))
    return out


def _weights_product(alpha: float, n: tuple[int, ...]) -> list[float]:
    R = len(n)
    out = []
    for i in range(R):
        value = 1.0
        for j in range(R):
            if j != i:
                value /= 1.0 - (n[j] / n[i]) ** alpha
        out.append(value)
    return out


def geometric_weights(alpha: float, M: int, R: int) -> list[float]:
    """Specialised closed form for n_i = M^(i-1).

    w_i = (-1)^(R-i) M^(-alpha (R-i)(R-i+1)/2)
          / (prod_{j=1}^{i-1} (1 - M^(-j alpha)) * prod_{j=1}^{R-i} (1 - M^(-j alpha)))
    """
    tail = [1.0]
    for j in range(1, R):
        tail.append(tail[-1] * (1.0 - M ** (-j * alpha)))
    out = []
    for i in range(1, R + 1):
        k = R - i
        log_scale = -alpha * k * (k + 1) / 2.0 * math.log(M)
        if log_scale < _EXP_MIN:
            raise WeightOverflowError(f"Weight w_{i} underflows for alpha={alpha}, M={M}, R={R}")
        sign = -1.0 if k % 2 else 1.0
        out.append(sign * math.exp(log_scale) / (tail[i - 1] * tail[k]))
    return out


def consecutive_weights(alpha: float, R: int) -> list[float]:
    """Specialised closed form for n_i = i.

    w_i = (-1)^(R-i) i^(alpha (R-1)) / (prod_{j<i} (i^a - j^a) * prod_{j>i} (j^a - i^a))
    """
    out = []
    for i in range(1, R + 1):
        num = float(i) ** (alpha * (R - 1))
        den = 1.0
        for j in range(1, R + 1):
            if j < i:
                den *= i ** alpha - j ** alpha
            elif j > i:
                den *= j ** alpha - i ** alpha
        sign = -1.0 if (R - i) % 2 else 1.0
        out.append(sign * num / den)
    return out


def wtilde(alpha: float, refiners: Sequence[int]) -> float:
    """(-1)^(R-1) / (n_1 ... n_R)^alpha, the first uncancelled moment."""
    n = validate_refiners(refiners)
    log_prod = alpha * sum(math.log(x) for x in n)
    if -log_prod < _EXP_MIN:
        raise WeightOverflowError(f"(prod n_i)^alpha overflows for alpha={alpha}, refiners={list(n)}")
    sign = -1.0 if (len(n) - 1) % 2 else 1.0
    return sign * math.exp(-log_prod)


def solve_weights(alpha: float, refiners: Sequence[int]) -> WeightVector:
    """Closed-form solution of the Vandermonde system for the given refiners.

    Args:
        alpha: weak error exponent (> 0)
        refiners: strictly increasing integers starting at 1

    Returns:
        WeightVector with weights and wtilde.

    Raises:
        WeightOverflowError: when a weight is not representable in double precision.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    n = validate_refiners(refiners)
    R = len(n)
    family, M = refiner_family(n)
    # alpha R (R-1)/2 log M, with M = n_R^(1/(R-1)) for non-geometric refiners
    spread = alpha * R * math.log(n[-1]) / 2.0

    if R == 1:
        w = [1.0]
    elif family == "geometric":
        w = geometric_weights(alpha, M, R)
    elif spread > LOG_DOMAIN_THRESHOLD:
        logger.debug("Log-domain weights for alpha=%s, refiners=%s", alpha, n)
        w = _weights_log_domain(alpha, n)
    elif family == "consecutive":
        w = consecutive_weights(alpha, R)
    else:
        w = _weights_product(alpha, n)

    if not all(math.isfinite(x) for x in w):
        raise WeightOverflowError(f"Non-finite weights for alpha={alpha}, refiners={list(n)}")
    if R > 16:
        logger.warning("Depth R=%d beyond the tested range; weight precision is not guaranteed", R)
    return WeightVector(alpha=float(alpha), refiners=n, w=tuple(w), wtilde=wtilde(alpha, n))


def vandermonde_matrix(alpha: float, refiners: Sequence[int]) -> np.ndarray:
    """Rows k = 0..R-1 with entries n_i^(-alpha k)."""
    n = np.asarray(validate_refiners(refiners), dtype=float)
    k = np.arange(len(n), dtype=float)[:, None]
    return n[None, :] ** (-alpha * k)


def dense_weights(alpha: float, refiners: Sequence[int]) -> np.ndarray:
    """Dense linear solve of the Vandermonde system. Oracle only."""
    V = vandermonde_matrix(alpha, refiners)
    e1 = np.zeros(V.shape[0])
    e1[0] = 1.0
    return np.linalg.solve(V, e1)


def cumulative_weights(w: WeightVector | Sequence[float]) -> tuple[float, ...]:
    """W_j = sum_{i >= j} w_i."""
    values = w.w if isinstance(w, WeightVector) else tuple(w)
    out = []
    acc = 0.0
    for x in reversed(values):
        acc += x
        out.append(acc)
    out.reverse()
    if isinstance(w, WeightVector):
        out[0] = 1.0  # sum of all weights, exact by construction
    return tuple(out)


def c1_zero_weights(w_prev: WeightVector | Sequence[float], alpha: float, refiners: Sequence[int]) -> tuple[float, ...]:
    """Weights of size R-1 that cancel orders 2..R when c_1 = 0.

    w~_r = n_r^alpha w_r^(R-1) / sum_s n_s^alpha w_s^(R-1)
    """
    values = w_prev.w if isinstance(w_prev, WeightVector) else tuple(w_prev)
    n = validate_refiners(refiners)
    if len(n) != len(values):
        raise ValueError(f"Weights ({len(values)}) and refiners ({len(n)}) differ in length")
    scaled = [x ** alpha * wr for x, wr in zip(n, values)]
    total = math.fsum(scaled)
    if abs(total) < 1e-300:
        raise DegenerateWeightsError(f"Vanishing normaliser for refiners={list(n)}, alpha={alpha}")
    return tuple(s / total for s in scaled)


# === Infinite products and bounds ===

def pi_alpha_m(alpha: float, M: int, truncation: int = SERIES_TERMS) -> float:
    """Truncated product prod_{k>=1} (1 - M^(-alpha k))."""
    if truncation < 1:
        raise ValueError(f"truncation must be >= 1, got {truncation}")
    out = 1.0
    for k in range(1, truncation + 1):
        out *= 1.0 - float(M) ** (-alpha * k)
    return out


def w_alpha_bound(alpha: float, M: int, truncation: int = SERIES_TERMS) -> float:
    """Upper bound on max_j |W_j(R, M)| uniform in R.

    W_alpha(M) = M^(-alpha) / pi^2 * sum_{k>=0} M^(-alpha k (k+3) / 2) + 1 / pi
    """
    if truncation < 1:
        raise ValueError(f"truncation must be >= 1, got {truncation}")
    pi = pi_alpha_m(alpha, M, truncation)
    series = math.fsum(float(M) ** (-alpha * k * (k + 3) / 2.0) for k in range(truncation))
    return float(M) ** (-alpha) / pi ** 2 * series + 1.0 / pi


# === Allocation matrices ===

@dataclass(frozen=True, eq=False)
class AllocationMatrix:
    """R x R matrix whose column j combines the levels of stratum j."""
    template: str
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"Allocation matrix must be square, got shape {entries.shape}")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def R(self) -> int:
        return self.entries.shape[0]

    def column(self, j: int) -> np.ndarray:
        return self.entries[:, j]

    def column_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def active_columns(self) -> list[int]:
        """Indices of columns with at least one nonzero entry (the strata)."""
        return [j for j in range(self.R) if np.any(self.entries[:, j] != 0.0)]

    def base_column(self) -> int:
        """The stratum whose entries sum to one."""
        sums = self.column_sums()
        for j in self.active_columns():
            if abs(sums[j] - 1.0) < 1e-9:
                return j
        raise ValueError(f"Allocation matrix '{self.template}' has no unit-sum column")

    def total(self) -> float:
        return float(self.entries.sum())


def allocation_matrix(template: str, R: int, w: Optional[WeightVector] = None) -> AllocationMatrix:
    """Build the allocation matrix of a named estimator template.

    crude and multistep pad with zero columns; the ml2r templates need the
    weights of matching depth.
    """
    if template not in TEMPLATES:
        raise ValueError(f"Unknown template '{template}'. Expected one of {TEMPLATES}")
    if R < 1:
        raise ValueError(f"Depth R must be >= 1, got {R}")
    needs_weights = template in ML2R_TEMPLATES or template == "multistep"
    if needs_weights:
        if w is None:
            raise ValueError(f"Template '{template}' requires a weight vector")
        if w.R != R:
            raise ValueError(f"Weight vector has depth {w.R}, template requested R={R}")
    T = np.zeros((R, R))

    if template == "crude":
        T[0, 0] = 1.0
    elif template == "multistep":
        T[:, 0] = w.w
    elif template == "mlmc":
        T[0, 0] = 1.0
        for j in range(1, R):
            T[j - 1, j] = -1.0
            T[j, j] = 1.0
    elif template == "ml2r-telescopic":
        W = cumulative_weights(w)
        T[0, 0] = 1.0
        for j in range(1, R):
            T[j - 1, j] = -W[j]
            T[j, j] = W[j]
    elif template == "ml2r-first-column":
        T[0, 0] = 1.0
        for j in range(1, R):
            T[0, j] = -w.w[j]
            T[j, j] = w.w[j]
    else:  # ml2r-lower-triangular
        partial = np.cumsum(w.w)
        for j in range(R - 1):
            T[j, j] = partial[j]
            T[j + 1, j] = -partial[j]
        T[R - 1, R - 1] = 1.0
    return AllocationMatrix(template=template, entries=T)


# === Weight tables ===

WEIGHT_TABLE_COLUMNS = ["alpha", "M", "R", "i", "w_i", "W_i"]


def weight_table(alphas: Iterable[float], M_values: Iterable[int], R_values: Iterable[int]) -> list[dict]:
    """Rows of geometric weights and cumulative weights for offline tabulation."""
    rows = []
    for alpha in alphas:
        for M in M_values:
            for R in R_values:
                wv = solve_weights(alpha, geometric_refiners(M, R))
                for i, (wi, Wi) in enumerate(zip(wv.w, wv.cumulative()), start=1):
                    rows.append({"alpha": alpha, "M": M, "R": R, "i": i, "w_i": wi, "W_i": Wi})
    return rows


def write_weight_table(path: str | Path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=WEIGHT_TABLE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
