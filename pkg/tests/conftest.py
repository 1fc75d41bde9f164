from __future__ import annotations

import numpy as np
import pytest

from ml2r.models import FROZEN_PARAMS, SamplerBase, SyntheticParams, synthetic_sampler
from ml2r.plan import StructuralParams


class AffineSampler(SamplerBase):
    """Noise-free Y_h = y0 + sum_k c_k h^(alpha k)."""

    def __init__(self, y0: float = 2.0, coeffs: tuple[float, ...] = (1.0,), alpha: float = 1.0,
                 h_max: float = 1.0):
        self.y0 = y0
        self.coeffs = coeffs
        self.alpha = alpha
        self.h_max = h_max

    def mean(self, h: float) -> float:
        return self.y0 + sum(c * h ** (self.alpha * k) for k, c in enumerate(self.coeffs, start=1))

    def sample_joint(self, h, refiners, stream, size):
        return np.tile([self.mean(h / n) for n in refiners], (size, 1))


@pytest.fixture
def call_params() -> StructuralParams:
    return FROZEN_PARAMS["call"]


@pytest.fixture
def barrier_params() -> StructuralParams:
    return FROZEN_PARAMS["barrier"]


@pytest.fixture
def nested_params() -> StructuralParams:
    return FROZEN_PARAMS["nested"]


@pytest.fixture
def affine_sampler() -> AffineSampler:
    return AffineSampler()


@pytest.fixture
def synthetic():
    return synthetic_sampler(SyntheticParams())
