"""Inverse-propensity pseudo-outcomes and their task coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Environment, ObservationalModel, PropensityModel


@dataclass(frozen=True)
class PseudoSample:
    covariates: np.ndarray
    treatment: int
    pseudo_y: float
    target_residual: float


@dataclass(frozen=True)
class PseudoOutcomes:
    """Row-aligned arrays of transformed experimental samples.

    ``target_residual`` (pseudo-outcome minus the observational gap
    estimate) is the regression target of every GP model.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    propensity: np.ndarray
    pseudo_y: np.ndarray
    target_residual: np.ndarray

    def __len__(self) -> int:
        return self.pseudo_y.shape[0]

    def __getitem__(self, i: int) -> PseudoSample:
        return PseudoSample(
            self.covariates[i],
            int(self.treatments[i]),
            float(self.pseudo_y[i]),
            float(self.target_residual[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def ipw_weight(t, pi):
    """``(t - pi) / (pi (1 - pi))``: ``1/pi`` if treated, ``-1/(1-pi)`` if not."""
    t = np.asarray(t, dtype=float)
    pi = np.asarray(pi, dtype=float)
    return (t - pi) / (pi * (1.0 - pi))


def ipw_transform(
    exp: Dataset,
    propensity: PropensityModel,
    obs_model: ObservationalModel | None = None,
) -> PseudoOutcomes:
    """Pseudo-outcomes for an experimental dataset.

    Raises :class:`OverlapViolation` (from the propensity model) if any
    row's propensity leaves the strict-overlap interval.
    """
    if exp.environment != Environment.EXPERIMENTAL:
        raise ValueError("pseudo-outcomes are defined for the experimental dataset")
    if exp.outcomes is None:
        raise ValueError("experimental dataset has no outcomes")
    pi = propensity(exp.covariates)
    pseudo = ipw_weight(exp.treatments, pi) * exp.outcomes
    gap = np.zeros(exp.n) if obs_model is None else obs_model.predict_gap(exp.covariates)
    return PseudoOutcomes(exp.covariates, exp.treatments, pi, pseudo, pseudo - gap)


def task_coefficients(pi: float) -> tuple[np.ndarray, np.ndarray]:
    """Mixing coefficients ``(a, b)`` for tasks (control, treated, CATE).

    ``a`` weights the CATE-gap component and ``b`` the nuisance component
    ``phi``; the noiseless CATE task carries no nuisance.
    """
    if not 0.0 < pi < 1.0:
        raise ValueError(f"propensity must lie in (0, 1), got {pi}")
    a = np.ones(3)
    b = np.array([-1.0 / (1.0 - pi), 1.0 / pi, 0.0])
    return a, b


def nuisance_component(mu0, mu1, pi):
    """``phi = (1 - pi) mu(x, 1) + pi mu(x, 0)`` from the outcome regressions."""
    pi = np.asarray(pi, dtype=float)
    return (1.0 - pi) * np.asarray(mu1, dtype=float) + pi * np.asarray(mu0, dtype=float)
