"""
models.py
---------
Level samplers for the benchmark models and the synthetic oracle.

- GBM Euler scheme with consistent Brownian increments (call, lookback, barrier)
- Nested Monte Carlo put-on-call (inner sample size K = 1/h)
- Synthetic weak/strong expansion model with closed-form moments

Every sampler is immutable; all randomness comes from the Stream handed in.
A joint draw returns Y_{h/n_1}, ..., Y_{h/n_R} built from the same randomness;
base and pair draws are its one- and two-component cases.

Usage:
    from ml2r.models import load_model
    model = load_model("call")
    y = model.sampler.sample_base(1.0, Stream.from_key(7), 1000)
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.stats import norm

from ._common import ML2RError, check_keys, load_document, resolve_config_path
from .plan import StructuralParams
from .rng import Stream

logger = logging.getLogger(__name__)

PAYOFF_KINDS = ("call", "lookback", "barrier", "terminal")
COUPLINGS = ("anti", "identical", "fresh")
INNER_BLOCK = 256       # inner Gaussians drawn per block in the nested sampler
STEP_BLOCK = 64         # Euler steps drawn per block


class CouplingError(ML2RError, ValueError):
    """The sampler cannot couple the requested levels."""


# === Parameters ===

@dataclass(frozen=True)
class GBMParams:
    """Black-Scholes dynamics dS = r S dt + sigma S dW on [0, T]."""
    s0: float
    r: float
    sigma: float
    T: float

    def __post_init__(self):
        if not self.s0 > 0:
            raise ValueError(f"s0 must be > 0, got {self.s0}")
        if not self.T > 0:
            raise ValueError(f"T must be > 0, got {self.T}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Payoff:
    kind: str
    K: Optional[float] = None
    lam: Optional[float] = None  # lookback multiplier
    B: Optional[float] = None    # barrier level

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ValueError(f"Unknown payoff '{self.kind}'. Expected one of {PAYOFF_KINDS}")
        if self.kind in ("call", "barrier") and not (self.K is not None and self.K > 0):
            raise ValueError(f"{self.kind} payoff needs a strike K > 0, got {self.K}")
        if self.kind == "lookback" and not (self.lam is not None and self.lam >= 1):
            raise ValueError(f"lookback payoff needs lambda >= 1, got {self.lam}")
        if self.kind == "barrier" and not (self.B is not None and self.B > self.K):
            raise ValueError(f"barrier payoff needs B > K, got B={self.B}, K={self.K}")

    def evaluate(self, s_T: np.ndarray, s_min: np.ndarray, s_max: np.ndarray, discount: float) -> np.ndarray:
        if self.kind == "call":
            return discount * np.maximum(s_T - self.K, 0.0)
        if self.kind == "lookback":
            return discount * np.maximum(s_T - self.lam * s_min, 0.0)
        if self.kind == "barrier":
            return discount * np.maximum(s_T - self.K, 0.0) * (s_max <= self.B)
        return s_T.copy()


@dataclass(frozen=True)
class NestedParams:
    """Put on call: (K1 - E[(S_T2 - K2)_+ | S_T1])_+ paid at T1."""
    gbm: GBMParams
    T1: float
    T2: float
    K1: float
    K2: float

    def __post_init__(self):
        if not 0 < self.T1 < self.T2:
            raise ValueError(f"Need 0 < T1 < T2, got T1={self.T1}, T2={self.T2}")


@dataclass(frozen=True)
class SyntheticParams:
    """Y_h = Y_0 + sum_k c_k h^(alpha k) + sqrt(V1) h^(beta/2) xi."""
    y0_mean: float = 1.0
    y0_std: float = 1.0
    coeffs: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    alpha: float = 1.0
    beta: float = 1.0
    V1: float = 1.0
    coupling: str = "anti"
    h_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.coupling not in COUPLINGS:
            raise ValueError(f"Unknown coupling '{self.coupling}'. Expected one of {COUPLINGS}")
        if self.y0_std < 0 or self.V1 < 0:
            raise ValueError("y0_std and V1 must be >= 0")


# === Sampler contract ===

class LevelSampler(Protocol):
    h_max: float

    def sample_base(self, h: float, stream: Stream, size: int) -> np.ndarray: ...

    def sample_pair(self, h: float, n_coarse: int, n_fine: int, stream: Stream,
                    size: int) -> tuple[np.ndarray, np.ndarray]: ...

    def sample_joint(self, h: float, refiners: Sequence[int], stream: Stream, size: int) -> np.ndarray: ...

    def unit_cost_hint(self, regime: Optional[str] = None) -> str: ...


def _check_levels(refiners: Sequence[int]) -> tuple[int, ...]:
    n = tuple(int(x) for x in refiners)
    if not n or n[0] < 1 or any(b <= a for a, b in zip(n, n[1:])):
        raise CouplingError(f"Levels must be strictly increasing positive integers, got {list(refiners)}")
    return n


def _grid_count(h_max: float, h: float) -> int:
    """n with h = h_max / n, or CouplingError when h is off the admissible grid."""
    if not h > 0:
        raise CouplingError(f"h must be > 0, got {h}")
    ratio = h_max / h
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(ratio, 1.0):
        raise CouplingError(f"h={h} is not on the grid h_max/n (h_max={h_max})")
    return n


class SamplerBase:
    """Base and pair draws as the one- and two-level cases of sample_joint."""

    h_max: float = 1.0
    regime: str = "sum"

    def sample_base(self, h: float, stream: Stream, size: int) -> np.ndarray:
        return self.sample_joint(h, (1,), stream, size)[:, 0]

    def sample_pair(self, h: float, n_coarse: int, n_fine: int, stream: Stream,
                    size: int) -> tuple[np.ndarray, np.ndarray]:
        if n_fine <= n_coarse:
            raise CouplingError(f"Pair needs n_coarse < n_fine, got ({n_coarse}, {n_fine})")
        joint = self.sample_joint(h, (n_coarse, n_fine), stream, size)
        return joint[:, 0], joint[:, 1]

    def sample_joint(self, h: float, refiners: Sequence[int], stream: Stream, size: int) -> np.ndarray:
        raise NotImplementedError

    def unit_cost_hint(self, regime: Optional[str] = None) -> str:
        return regime or self.regime


# === GBM Euler scheme ===

class GBMEulerSampler(SamplerBase):
    """Euler scheme S_{k+1} = S_k (1 + r dt + sigma dW) with discrete monitoring.

    Joint draws simulate Brownian increments on the grid of step h / lcm(n)
    and aggregate them for coarser levels, so all levels share one path.
    """

    def __init__(self, gbm: GBMParams, payoff: Payoff):
        self.gbm = gbm
        self.payoff = payoff
        self.h_max = gbm.T
        self.regime = "sum"

    def sample_joint(self, h: float, refiners: Sequence[int], stream: Stream, size: int) -> np.ndarray:
        n = _check_levels(refiners)
        n_base = _grid_count(self.h_max, h)
        g = self.gbm
        L = math.lcm(*n)
        ratios = [L // x for x in n]
        fine_steps = n_base * L
        sqrt_dt = math.sqrt(g.T / fine_steps)
        drifts = [g.r * g.T / (n_base * x) for x in n]

        R = len(n)
        s = np.full((R, size), g.s0)
        acc = np.zeros((R, size))
        s_min = s.copy()
        s_max = s.copy()
        k = 0
        while k < fine_steps:
            block = min(STEP_BLOCK, fine_steps - k)
            dW = sqrt_dt * stream.normals((block, size))
            for b in range(block):
                acc += dW[b]
                k += 1
                for i in range(R):
                    if k % ratios[i] == 0:
                        s[i] *= 1.0 + drifts[i] + g.sigma * acc[i]
                        acc[i] = 0.0
                        np.minimum(s_min[i], s[i], out=s_min[i])
                        np.maximum(s_max[i], s[i], out=s_max[i])
        discount = math.exp(-g.r * g.T)
        out = np.empty((size, R))
        for i in range(R):
            out[:, i] = self.payoff.evaluate(s[i], s_min[i], s_max[i], discount)
        return out

    def euler_mean(self, h: float) -> float:
        """Exact mean of the Euler terminal value at step h."""
        n_steps = _grid_count(self.h_max, h)
        return self.gbm.s0 * (1.0 + self.gbm.r * self.gbm.T / n_steps) ** n_steps


def gbm_euler_sampler(gbm: GBMParams, payoff: Payoff) -> GBMEulerSampler:
    return GBMEulerSampler(gbm, payoff)


# === Nested Monte Carlo ===

class NestedSampler(SamplerBase):
    """Put on call with an inner Monte Carlo of size K = 1/h per outer draw.

    Coarser levels reuse the first K_coarse inner draws of the finest level.
    """

    def __init__(self, p: NestedParams):
        self.p = p
        self.h_max = 1.0
        self.regime = "max"

    def sample_joint(self, h: float, refiners: Sequence[int], stream: Stream, size: int) -> np.ndarray:
        n = _check_levels(refiners)
        k_base = _grid_count(self.h_max, h)
        sizes = [k_base * x for x in n]
        k_max = sizes[-1]
        for k_i in sizes:
            if k_max % k_i:
                raise CouplingError(f"Inner size {k_max} is not a multiple of {k_i}")

        p, g = self.p, self.p.gbm
        tau = p.T2 - p.T1
        s1 = g.s0 * np.exp((g.r - 0.5 * g.sigma ** 2) * p.T1 + g.sigma * math.sqrt(p.T1) * stream.normals(size))
        inner_drift = (g.r - 0.5 * g.sigma ** 2) * tau
        inner_vol = g.sigma * math.sqrt(tau)

        total = np.zeros(size)
        means = {}
        drawn = 0
        for target in sizes:
            while drawn < target:
                block = min(INNER_BLOCK, target - drawn)
                z = stream.normals((block, size))
                total += np.maximum(s1 * np.exp(inner_drift + inner_vol * z) - p.K2, 0.0).sum(axis=0)
                drawn += block
            means[target] = total / target

        outer_discount = math.exp(-g.r * p.T1)
        inner_discount = math.exp(-g.r * tau)
        out = np.empty((size, len(n)))
        for i, k_i in enumerate(sizes):
            out[:, i] = outer_discount * np.maximum(p.K1 - inner_discount * means[k_i], 0.0)
        return out


def nested_sampler(p: NestedParams) -> NestedSampler:
    return NestedSampler(p)


# === Synthetic expansion model ===

class SyntheticSampler(SamplerBase):
    """Exact weak expansion and exact strong error; test oracle."""

    def __init__(self, p: SyntheticParams):
        self.p = p
        self.h_max = p.h_max
        self.regime = "sum"

    def mean(self, h: float) -> float:
        p = self.p
        return p.y0_mean + math.fsum(c * h ** (p.alpha * k) for k, c in enumerate(p.coeffs, start=1))

    def strong_error_sq(self, h: float) -> float:
        return self.p.V1 * h ** self.p.beta

    def sample_joint(self, h: float, refiners: Sequence[int], stream: Stream, size: int) -> np.ndarray:
        n = _check_levels(refiners)
        if not h > 0:
            raise CouplingError(f"h must be > 0, got {h}")
        p = self.p
        R = len(n)
        y0 = p.y0_mean + p.y0_std * stream.normals(size)
        if p.coupling == "fresh":
            xi = stream.normals((R, size))
        else:
            base = stream.normals(size)
            signs = [(-1.0) ** i if p.coupling == "anti" else 1.0 for i in range(R)]
            xi = np.stack([sgn * base for sgn in signs])
        out = np.empty((size, R))
        for i, x in enumerate(n):
            h_i = h / x
            bias = self.mean(h_i) - p.y0_mean
            out[:, i] = y0 + bias + math.sqrt(p.V1) * h_i ** (p.beta / 2.0) * xi[i]
        return out


def synthetic_sampler(p: SyntheticParams) -> SyntheticSampler:
    return SyntheticSampler(p)


# === Reference prices ===

def bs_call_price(gbm: GBMParams, K: float) -> float:
    """Discounted E (S_T - K)_+ under Black-Scholes."""
    disc = math.exp(-gbm.r * gbm.T)
    if gbm.sigma == 0:
        return disc * max(gbm.s0 * math.exp(gbm.r * gbm.T) - K, 0.0)
    vol = gbm.sigma * math.sqrt(gbm.T)
    d1 = (math.log(gbm.s0 / K) + (gbm.r + 0.5 * gbm.sigma ** 2) * gbm.T) / vol
    d2 = d1 - vol
    return gbm.s0 * norm.cdf(d1) - K * disc * norm.cdf(d2)


@lru_cache(maxsize=16)
def nested_reference_price(p: NestedParams) -> float:
    """Limit value e^(-r T1) E (K1 - C(S_T1))_+ with C the Black-Scholes call on [T1, T2].

    The integrand is positive below the root z* of C(S_T1(z)) = K1; the
    integral over the Gaussian is split there.
    """
    g = p.gbm
    tau = p.T2 - p.T1

    def s_of(z):
        return g.s0 * math.exp((g.r - 0.5 * g.sigma ** 2) * p.T1 + g.sigma * math.sqrt(p.T1) * z)

    def call_at(z):
        return bs_call_price(GBMParams(s0=s_of(z), r=g.r, sigma=g.sigma, T=tau), p.K2)

    discount = math.exp(-g.r * p.T1)
    if g.sigma == 0:
        return discount * max(p.K1 - call_at(0.0), 0.0)

    def integrand(z):
        return max(p.K1 - call_at(z), 0.0) * norm.pdf(z)

    lo, hi = -12.0, 12.0
    if call_at(hi) <= p.K1:
        z_star = hi
    elif call_at(lo) >= p.K1:
        return 0.0
    else:
        z_star = optimize.brentq(lambda z: call_at(z) - p.K1, lo, hi, xtol=1e-14)
    value, err = integrate.quad(integrand, -np.inf, z_star, epsabs=1e-12, epsrel=1e-12, limit=200)
    logger.debug("Nested reference quadrature: %.10f (abs err %.2e)", value, err)
    return discount * value


# === Model registry ===

@dataclass(frozen=True)
class Model:
    """A sampler with its declared structure and reference value."""
    model_id: str
    sampler: SamplerBase
    params: StructuralParams          # frozen structural parameters used for planning
    reference: Optional[float]
    regime: str = "sum"
    document: dict = field(default_factory=dict, compare=False)

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def beta(self) -> float:
        return self.params.beta


CALL_DEFAULTS = {"model": "call", "s0": 100.0, "r": 0.06, "sigma": 0.4, "T": 1.0, "K": 80.0}
LOOKBACK_DEFAULTS = {"model": "lookback", "s0": 100.0, "r": 0.15, "sigma": 0.1, "T": 1.0, "lambda": 1.1}
BARRIER_DEFAULTS = {"model": "barrier", "s0": 100.0, "r": 0.0, "sigma": 0.15, "T": 1.0, "K": 100.0, "B": 120.0}
NESTED_DEFAULTS = {"model": "nested", "s0": 100.0, "r": 0.03, "sigma": 0.3, "T1": 1.0 / 12.0, "T2": 0.5,
                   "K1": 6.5, "K2": 100.0}
SYNTHETIC_DEFAULTS = {"model": "synthetic", "y0_mean": 1.0, "y0_std": 1.0, "coeffs": [1.0, 0.5, 0.25, 0.125],
                      "alpha": 1.0, "beta": 1.0, "V1": 1.0, "coupling": "anti"}

MODELS = {
    "call": CALL_DEFAULTS,
    "lookback": LOOKBACK_DEFAULTS,
    "barrier": BARRIER_DEFAULTS,
    "nested": NESTED_DEFAULTS,
    "synthetic": SYNTHETIC_DEFAULTS,
}

# Structural parameters as roughly estimated for the published experiments
FROZEN_PARAMS = {
    "call": StructuralParams(alpha=1.0, beta=1.0, V1=56.0, var_Y0=876.0),
    "lookback": StructuralParams(alpha=0.5, beta=1.0, V1=3.58, var_Y0=41.0),
    "barrier": StructuralParams(alpha=0.5, beta=0.5, V1=5.30, var_Y0=303.0),
    "nested": StructuralParams(alpha=1.0, beta=1.0, V1=7.20, var_Y0=9.09),
}

REFERENCE_PRICES = {
    "call": 29.4987,
    "lookback": 8.89343,
    "barrier": 1.855225,
}

MODEL_KEYS = {"model", "s0", "r", "sigma", "T", "K", "B", "lambda", "T1", "T2", "K1", "K2",
              "coeffs", "coupling", "y0_mean", "y0_std", "alpha", "beta", "V1", "h_max", "params"}


def reference_price(model_id: str) -> float:
    """Reference value E Y_0 for a named model."""
    if model_id in REFERENCE_PRICES:
        return REFERENCE_PRICES[model_id]
    if model_id == "nested":
        return nested_reference_price(_nested_params(NESTED_DEFAULTS))
    if model_id == "synthetic":
        return float(SYNTHETIC_DEFAULTS["y0_mean"])
    raise ValueError(f"Unknown model '{model_id}'. Expected one of {sorted(MODELS)}")


def _nested_params(doc: dict) -> NestedParams:
    gbm = GBMParams(s0=doc["s0"], r=doc["r"], sigma=doc["sigma"], T=doc["T2"])
    return NestedParams(gbm=gbm, T1=doc["T1"], T2=doc["T2"], K1=doc["K1"], K2=doc["K2"])


def build_model(doc: dict) -> Model:
    """Build a Model from a model document; missing keys take the preset values."""
    check_keys(doc, MODEL_KEYS, "model document")
    model_id = doc.get("model")
    if model_id not in MODELS:
        raise ValueError(f"Unknown model '{model_id}'. Expected one of {sorted(MODELS)}")
    full = {**MODELS[model_id], **doc}
    is_preset = all(full.get(k) == v for k, v in MODELS[model_id].items())

    if model_id in ("call", "lookback", "barrier"):
        gbm = GBMParams(s0=full["s0"], r=full["r"], sigma=full["sigma"], T=full["T"])
        if model_id == "call":
            payoff = Payoff("call", K=full["K"])
        elif model_id == "lookback":
            payoff = Payoff("lookback", lam=full["lambda"])
        else:
            payoff = Payoff("barrier", K=full["K"], B=full["B"])
        sampler = gbm_euler_sampler(gbm, payoff)
        frozen = FROZEN_PARAMS[model_id]
        params = StructuralParams(**{**frozen.to_dict(), "h_max": gbm.T})
        if model_id == "call":
            reference = bs_call_price(gbm, full["K"]) if not is_preset else REFERENCE_PRICES["call"]
        else:
            reference = REFERENCE_PRICES[model_id] if is_preset else None
        regime = "sum"
    elif model_id == "nested":
        p = _nested_params(full)
        sampler = nested_sampler(p)
        params = FROZEN_PARAMS["nested"]
        reference = nested_reference_price(p)
        regime = "max"
    else:
        sp = SyntheticParams(y0_mean=full["y0_mean"], y0_std=full["y0_std"], coeffs=tuple(full["coeffs"]),
                             alpha=full["alpha"], beta=full["beta"], V1=full["V1"], coupling=full["coupling"],
                             h_max=full.get("h_max", 1.0))
        sampler = synthetic_sampler(sp)
        var = sp.y0_std ** 2 if sp.y0_std > 0 else 1.0
        c1 = sp.coeffs[0] if sp.coeffs else 0.0
        params = StructuralParams(alpha=sp.alpha, beta=sp.beta, V1=sp.V1, var_Y0=var, h_max=sp.h_max, c1=c1)
        reference = sp.y0_mean
        regime = "sum"

    if "params" in full and full["params"]:
        params = StructuralParams.from_dict({**params.to_dict(), **full["params"]})
    return Model(model_id=model_id, sampler=sampler, params=params, reference=reference, regime=regime,
                 document=full)


def load_model(name_or_path: str) -> Model:
    """Load a preset by name, or a JSON model document from configs/ or a path."""
    try:
        path = resolve_config_path(name_or_path)
    except ValueError:
        if name_or_path in MODELS:
            return build_model({"model": name_or_path})
        raise
    return build_model(load_document(path))
