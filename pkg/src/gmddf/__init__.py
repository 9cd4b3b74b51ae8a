"""Decentralized data fusion of Gaussian-mixture beliefs.

Exact (common-information quotient) and conservative (weighted exponential
product) fusion through a shared quotient-mixture expansion, with direct
local sampling (DLS) and indirect global sampling (IGS) approximation
engines, closed-form baselines, mixture compression, a benchmark harness,
and a maneuvering-target tracking simulation.
"""

from .gaussians import (
    GaussianComponent,
    GaussianMixture,
    RandomProblemConfig,
    gaussian_product,
    mixture_moments,
    random_gm,
)

__version__ = "0.1.0"

__all__ = [
    "GaussianComponent",
    "GaussianMixture",
    "RandomProblemConfig",
    "gaussian_product",
    "mixture_moments",
    "random_gm",
]
