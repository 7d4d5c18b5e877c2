"""Pseudo-outcome Gaussian processes for correcting observational CATE estimates.

The package fits a Gaussian process to inverse-propensity pseudo-outcomes
from a small randomized study, using an observational CATE estimate as the
prior mean, and reports credible intervals and uniform error bands for the
corrected CATE.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .bounds import BoundConfig, UniformBoundReport, uniform_band
from .data import Dataset, Environment, PropensityModel, fit_observational_ridge, load_csv
from .gp import GpModel, OptimizerConfig, fit, fit_variant, posterior, predict
from .pseudo_outcome import ipw_transform
from .simulate import SimConfig, generate, ihdp_surrogate

__all__ = [
    "BoundConfig",
    "Dataset",
    "Environment",
    "GpModel",
    "OptimizerConfig",
    "PropensityModel",
    "SimConfig",
    "UniformBoundReport",
    "fit",
    "fit_observational_ridge",
    "fit_variant",
    "generate",
    "ihdp_surrogate",
    "ipw_transform",
    "load_csv",
    "posterior",
    "predict",
    "uniform_band",
]
