"""Uniform high-probability error bands for the debiased CATE estimate.

For a posterior over the CATE gap, the half-width at ``x`` is

    B(x) = sqrt(beta) * sigma(x) + gamma,
    beta = 2 log(M(tau) / delta),
    gamma = (L_nu + L_f) tau + sqrt(beta) * omega_sigma(tau),

where ``M(tau)`` is the covering number of the support box, ``L_nu`` a
Lipschitz constant of the posterior mean, ``omega_sigma`` a modulus of
continuity of the posterior standard deviation and ``L_f`` a Lipschitz
constant of the unknown gap function.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from . import numerics
from .data import ObservationalModel, covering_number_hypercube, log_covering_number
from .exceptions import ConfigError, QueryOutsideSupport
from .gp import PosteriorState, posterior_gap
from .kernels import CATE

_BOX_TOL = 1e-9


@dataclass(frozen=True)
class BoundConfig:
    """Settings for :func:`uniform_band`.

    ``tau`` and ``L_f`` are optional: ``tau=None`` picks the covering radius
    that minimises the mean half-width over the query points, and
    ``L_f=None`` uses :func:`default_gap_lipschitz`.
    """

    delta: float = 0.05
    support_low: tuple[float, ...] = (-1.0,)
    support_high: tuple[float, ...] = (1.0,)
    tau: float | None = None
    L_f: float | None = None
    lf_draws: int = 3
    lf_points: int = 1000
    seed: int = 0

    def __post_init__(self):
        low = tuple(float(v) for v in np.atleast_1d(self.support_low))
        high = tuple(float(v) for v in np.atleast_1d(self.support_high))
        object.__setattr__(self, "support_low", low)
        object.__setattr__(self, "support_high", high)
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}", "bound.delta")
        if len(low) != len(high):
            raise ConfigError("support_low and support_high differ in length", "bound.support_high")
        if any(h <= lo for lo, h in zip(low, high)):
            raise ConfigError("support box must have positive side lengths", "bound.support_high")
        if self.tau is not None and self.tau <= 0:
            raise ConfigError("tau must be positive", "bound.tau")
        if self.L_f is not None and self.L_f < 0:
            raise ConfigError("L_f must be nonnegative", "bound.L_f")
        if self.lf_draws < 1 or self.lf_points < 1:
            raise ConfigError("lf_draws and lf_points must be >= 1", "bound.lf_draws")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BoundConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown bound setting {key!r}", f"bound.{key}")
        return cls(**dict(raw))

    @classmethod
    def for_box(cls, low, high, **kwargs) -> "BoundConfig":
        return cls(support_low=tuple(np.ravel(low)), support_high=tuple(np.ravel(high)), **kwargs)

    @property
    def side_lengths(self) -> np.ndarray:
        return np.asarray(self.support_high) - np.asarray(self.support_low)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.side_lengths))


@dataclass(frozen=True, eq=False)
class UniformBoundReport:
    """Constants of the band and the per-point half-widths."""

    beta: float
    covering: int
    log_covering: float
    tau: float
    delta: float
    L_k: float
    L_nu: float
    L_f: float
    omega_sigma: float
    gamma: float
    query: np.ndarray
    half_width: np.ndarray
    mean_cate: np.ndarray
    sigma: np.ndarray = field(repr=False)

    @property
    def lower(self) -> np.ndarray:
        return self.mean_cate - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.mean_cate + self.half_width

    def contains(self, truth) -> np.ndarray:
        truth = np.asarray(truth, dtype=float)
        return (self.lower <= truth) & (truth <= self.upper)

    def to_json(self) -> str:
        scalars = {
            name: getattr(self, name)
            for name in ("beta", "log_covering", "tau", "delta", "L_k", "L_nu", "L_f", "omega_sigma", "gamma")
        }
        scalars["covering"] = self.covering if self.log_covering < 700 else None
        rows = np.column_stack([self.query, self.half_width]).tolist()
        return json.dumps({**scalars, "per_point": rows})


def beta(log_covering: float, delta: float) -> float:
    """``2 log(M / delta)`` from ``log M``."""
    return 2.0 * (log_covering - math.log(delta))


def _cate_cross_constants(state: PosteriorState) -> tuple[float, float]:
    """Lipschitz constant and supremum of ``x -> cov(training row, CATE at x)``.

    Each kernel component contributes ``|u_i A u_cate|`` times its base
    kernel's constants; for the pseudo-outcome model this reduces to the
    CATE kernel ``k`` alone.
    """
    model = state.model
    kernel = model.kernel
    probe = np.zeros((1, model.x.shape[1] if model.n else 1))
    if model.n:
        rows, tasks = model.x, model.tasks
    else:
        rows, tasks = probe, np.array([CATE])
    lip = 0.0
    sup = 0.0
    cate_tasks = np.full(len(tasks), CATE)
    for comp, u_rows, u_cate in zip(kernel.components(), kernel.mixing(rows, tasks), kernel.mixing(rows, cate_tasks)):
        coef = np.abs(np.einsum("ij,jk,ik->i", u_rows, comp.coreg, u_cate)).max()
        lip += coef * comp.kernel.lipschitz()
        sup += coef * comp.kernel.variance
    return float(lip), float(sup)


def posterior_mean_lipschitz(state: PosteriorState) -> float:
    """``L_k sqrt(N) ||alpha||``, a Lipschitz constant of the posterior mean gap."""
    lip, _ = _cate_cross_constants(state)
    return float(lip * math.sqrt(state.model.n) * np.linalg.norm(state.alpha))


def inverse_gram_norm(state: PosteriorState) -> float:
    """``||(M_N + Sigma_N)^{-1}||_2`` from the smallest eigenvalue of the factored covariance."""
    if state.model.n == 0:
        return 0.0
    return numerics.inverse_spectral_norm(state.chol)


def modulus_of_continuity(state: PosteriorState, tau: float, inv_norm: float | None = None) -> float:
    """``sqrt(2 tau L_k (1 + N ||C^{-1}|| max k))`` for the posterior standard deviation."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    lip, sup = _cate_cross_constants(state)
    if inv_norm is None:
        inv_norm = inverse_gram_norm(state)
    return math.sqrt(2.0 * tau * lip * (1.0 + state.model.n * inv_norm * sup))


def default_gap_lipschitz(state: PosteriorState, draws: int = 3, points: int = 1000, seed: int = 0) -> float:
    """Prior-draw estimate of the gap function's Lipschitz constant.

    Under a zero-mean SE prior with scale ``s`` and lengthscale ``l`` the
    gradient at any point is ``N(0, (s/l)^2 I_d)``, so its norm is
    ``(s/l) chi_d``. The estimate is the largest gradient norm seen over
    ``draws`` prior functions at ``points`` locations each, treating the
    locations as independent (which can only raise the maximum).
    """
    model = state.model
    k = model.kernel.cate_kernel
    d = model.x.shape[1] if model.n else 1
    rng = np.random.default_rng(seed)
    norms = stats.chi.rvs(d, size=(draws, points), random_state=rng)
    return float(k.output_scale / k.lengthscale * norms.max())


class _BandTerms:
    """Query-independent pieces of the band, reused across candidate ``tau``."""

    def __init__(self, state: PosteriorState, cfg: BoundConfig, l_f: float):
        self.state = state
        self.cfg = cfg
        self.sides = cfg.side_lengths
        self.l_k, _ = _cate_cross_constants(state)
        self.l_nu = posterior_mean_lipschitz(state)
        self.inv_norm = inverse_gram_norm(state)
        self.l_f = l_f

    def at(self, tau: float) -> dict:
        log_m = log_covering_number(self.sides, tau)
        b = beta(log_m, self.cfg.delta)
        omega = modulus_of_continuity(self.state, tau, self.inv_norm)
        root = math.sqrt(max(b, 0.0))
        gamma = (self.l_nu + self.l_f) * tau + root * omega
        return {"log_covering": log_m, "beta": b, "omega_sigma": omega, "gamma": gamma, "root_beta": root}

    def mean_half_width(self, tau: float, mean_sigma: float) -> float:
        t = self.at(tau)
        return t["root_beta"] * mean_sigma + t["gamma"]


#: Smallest covering radius the search may reach, relative to the diameter.
TAU_FLOOR = 1e-15


def choose_tau(terms: _BandTerms, mean_sigma: float) -> float:
    """Covering radius minimising the mean half-width.

    Searches ``log tau`` over ``[log(diam / 1000), log(diam)]`` with scipy's
    bounded scalar minimiser (golden-section steps with parabolic
    acceleration). When the minimum lands on the lower edge, the window
    moves down three decades and the search repeats, stopping at
    ``TAU_FLOOR * diam``.
    """
    diam = terms.cfg.diameter
    hi = math.log(diam)
    lo = math.log(diam / 1e3)
    floor = math.log(diam * TAU_FLOOR)
    step = math.log(1e3)
    while True:
        result = optimize.minimize_scalar(
            lambda s: terms.mean_half_width(math.exp(s), mean_sigma),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-4},
        )
        if result.x - lo > 1e-2 or lo <= floor:
            return float(math.exp(result.x))
        hi, lo = lo + step / 10, max(lo - step, floor)


def _check_support(query: np.ndarray, cfg: BoundConfig) -> None:
    low, high = np.asarray(cfg.support_low), np.asarray(cfg.support_high)
    if query.shape[1] != low.size:
        raise QueryOutsideSupport(f"query dimension {query.shape[1]} != support dimension {low.size}")
    outside = np.any((query < low - _BOX_TOL) | (query > high + _BOX_TOL), axis=1)
    if outside.any():
        row = int(np.argmax(outside))
        raise QueryOutsideSupport(f"query row {row} lies outside the support box")


def uniform_band(
    state: PosteriorState,
    obs_model: ObservationalModel | None,
    cfg: BoundConfig,
    query: Sequence,
) -> UniformBoundReport:
    """Half-widths ``B(x)`` of a band holding over the whole support with probability ``1 - delta``.

    Raises :class:`QueryOutsideSupport` if any query point leaves the box.
    """
    query = np.atleast_2d(np.asarray(query, dtype=float))
    _check_support(query, cfg)
    mean_gap, var = posterior_gap(state, query)
    sigma = np.sqrt(var)
    l_f = cfg.L_f
    if l_f is None:
        l_f = default_gap_lipschitz(state, cfg.lf_draws, cfg.lf_points, cfg.seed)
    terms = _BandTerms(state, cfg, l_f)
    tau = cfg.tau if cfg.tau is not None else choose_tau(terms, float(sigma.mean()))
    t = terms.at(tau)
    half = t["root_beta"] * sigma + t["gamma"]
    offset = np.zeros(query.shape[0]) if obs_model is None else obs_model.predict_gap(query)
    if t["log_covering"] < 700:
        covering = covering_number_hypercube(cfg.side_lengths, tau)
    else:
        covering = math.prod(int(math.floor(1.0 + r / tau)) for r in cfg.side_lengths)
    return UniformBoundReport(
        beta=t["beta"],
        covering=covering,
        log_covering=t["log_covering"],
        tau=float(tau),
        delta=cfg.delta,
        L_k=terms.l_k,
        L_nu=terms.l_nu,
        L_f=float(l_f),
        omega_sigma=t["omega_sigma"],
        gamma=t["gamma"],
        query=query,
        half_width=half,
        mean_cate=offset + mean_gap,
        sigma=sigma,
    )
