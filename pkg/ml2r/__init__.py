"""Multilevel Richardson-Romberg Monte Carlo toolkit."""

from ._common import ML2RError
from .core import AllocationMatrix, RefinerScheme, WeightVector, allocation_matrix, solve_weights
from .engine import ReplicationStats, RunResult, replicate, run
from .models import MODELS, load_model
from .plan import Plan, StructuralParams, make_plan

__all__ = [
    "ML2RError",
    "AllocationMatrix",
    "RefinerScheme",
    "WeightVector",
    "allocation_matrix",
    "solve_weights",
    "ReplicationStats",
    "RunResult",
    "replicate",
    "run",
    "MODELS",
    "load_model",
    "Plan",
    "StructuralParams",
    "make_plan",
]
