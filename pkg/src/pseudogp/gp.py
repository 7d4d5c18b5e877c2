"""Marginal-likelihood fitting and closed-form posteriors.

A :class:`GpModel` regresses pseudo-outcome residuals observed on the arm
tasks (0, 1) and predicts the CATE-gap task (2). The free hyperparameters
are the kernel's log parameters followed by the log noise scales (one
tied scale for the naive model, one per arm otherwise).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.optimize
from scipy.spatial.distance import pdist

from . import numerics
from .data import ObservationalModel, PropensityModel
from .exceptions import AllRestartsFailed, NegativeVariance, NotPositiveDefinite
from .kernels import (
    CATE,
    LCMKernel,
    MultitaskKernel,
    NaiveKernel,
    NoiseParams,
    PseudoOutcomeKernel,
    SEKernel,
    sqdist,
)
from .pseudo_outcome import PseudoOutcomes

log = logging.getLogger(__name__)

Z_95 = 1.959964
VARIANCE_CLAMP = 1e-10
_LOG_2PI = math.log(2.0 * math.pi)
_PARAM_BOUND = 12.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameter search settings.

    ``method`` is ``"gradient_ascent"`` (fixed step with halving
    backtracking) or ``"lbfgs"``. Both work on the per-observation marginal
    likelihood, so ``step_size`` and ``grad_tol`` do not depend on ``n``.
    """

    method: str = "gradient_ascent"
    step_size: float = 0.1
    max_iters: int = 500
    grad_tol: float = 1e-4
    restarts: int = 3
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict | None) -> "OptimizerConfig":
        raw = dict(raw or {})
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(sorted(unknown)[0])
        cfg = cls(**raw)
        if cfg.method not in ("gradient_ascent", "lbfgs"):
            raise ValueError(f"unknown optimizer method {cfg.method!r}")
        if cfg.restarts < 1 or cfg.max_iters < 0 or cfg.step_size <= 0:
            raise ValueError("restarts >= 1, max_iters >= 0 and step_size > 0 required")
        return cfg


@dataclass(frozen=True)
class FitReport:
    mll: float
    grad_norm: float
    iterations: int
    restart: int
    converged: bool
    failed_restarts: int = 0
    restart_mlls: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class GpModel:
    """Kernel, noise and training data of one GP regression.

    ``targets`` are pseudo-outcome residuals; ``tasks`` are the training
    points' arms (0 or 1).
    """

    kernel: MultitaskKernel
    noise: NoiseParams
    x: np.ndarray
    tasks: np.ndarray
    targets: np.ndarray
    jitter: tuple[float, ...] = numerics.DEFAULT_JITTER
    report: FitReport | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if np.asarray(self.x).size == 0:
            x = x.reshape(0, x.shape[-1] if x.ndim == 2 else 1)
        tasks = np.asarray(self.tasks, dtype=np.int64).ravel()
        targets = np.asarray(self.targets, dtype=float).ravel()
        if not (x.shape[0] == tasks.shape[0] == targets.shape[0]):
            raise ValueError("x, tasks and targets must have the same number of rows")
        if np.any(tasks == CATE) or not np.all(np.isin(tasks, (0, 1))):
            raise ValueError("training tasks must be 0 or 1; the CATE task is prediction-only")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_pseudo(
        cls,
        variant: str,
        data: PseudoOutcomes,
        propensity: PropensityModel | None = None,
        kernel: MultitaskKernel | None = None,
        noise: NoiseParams | None = None,
        learn_scale: bool | tuple[bool, bool] = True,
    ) -> "GpModel":
        """Model of the given variant (``naive``, ``pseudo``/``ours``, ``lcm``) on pseudo-outcome residuals."""
        if kernel is None:
            kernel = default_kernel(variant, propensity, learn_scale)
        return cls(kernel, noise or NoiseParams(), data.covariates, data.treatments, data.target_residual)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def tied_noise(self) -> bool:
        return isinstance(self.kernel, NaiveKernel)

    @cached_property
    def sqdists(self) -> np.ndarray:
        return sqdist(self.x, self.x)

    @property
    def param_names(self) -> tuple[str, ...]:
        noise = ("log_sigma",) if self.tied_noise else ("log_sigma0", "log_sigma1")
        return self.kernel.param_names + noise

    @property
    def theta(self) -> np.ndarray:
        noise = [self.noise.log_sigma0] if self.tied_noise else [self.noise.log_sigma0, self.noise.log_sigma1]
        return np.concatenate([self.kernel.get_params(), noise])

    def with_theta(self, theta) -> "GpModel":
        theta = np.asarray(theta, dtype=float)
        n_kernel = len(self.kernel.param_names)
        kernel = self.kernel.with_params(theta[:n_kernel])
        if self.tied_noise:
            noise = NoiseParams(float(theta[n_kernel]), float(theta[n_kernel]))
        else:
            noise = NoiseParams(float(theta[n_kernel]), float(theta[n_kernel + 1]))
        model = replace(self, kernel=kernel, noise=noise, report=None)
        model.__dict__["sqdists"] = self.sqdists
        return model

    def covariance(self) -> np.ndarray:
        """``M_N + Sigma_N`` over the training points."""
        gram = self.kernel(self.x, self.tasks, self.x, self.tasks, d2=self.sqdists)
        gram[np.diag_indices_from(gram)] += self.noise.variances(self.tasks)
        return gram

    def to_dict(self) -> dict:
        out = {"kernel": self.kernel.to_dict(), "noise": {"sigma0": self.noise.sigma0, "sigma1": self.noise.sigma1}}
        if self.report is not None:
            out["report"] = {
                "mll": self.report.mll,
                "grad_norm": self.report.grad_norm,
                "iterations": self.report.iterations,
                "restart": self.report.restart,
                "converged": self.report.converged,
                "failed_restarts": self.report.failed_restarts,
            }
        return out


def default_kernel(
    variant: str, propensity: PropensityModel | None = None, learn_scale: bool | tuple[bool, bool] = True
) -> MultitaskKernel:
    """Unit-scale, unit-lengthscale kernel of the given variant.

    ``learn_scale`` says whether base output scales are optimised (a pair
    sets the CATE and nuisance kernels of the pseudo-outcome model
    separately). LCM output scales always live in its ``A`` matrices.
    """
    propensity = propensity or PropensityModel.constant(0.5)
    pair = (learn_scale, learn_scale) if isinstance(learn_scale, bool) else tuple(bool(v) for v in learn_scale)
    if variant == "naive":
        return NaiveKernel(SEKernel(), pair[0])
    if variant in ("pseudo", "ours"):
        return PseudoOutcomeKernel(SEKernel(), SEKernel(), propensity, pair)
    if variant == "lcm":
        return LCMKernel(SEKernel(), SEKernel(), propensity=propensity)
    raise ValueError(f"unknown model variant {variant!r}")


def _mll_terms(model: GpModel, with_grad: bool):
    n = model.n
    if with_grad:
        gram, grads = model.kernel.gram_with_grads(model.x, model.tasks, model.sqdists)
    else:
        gram, grads = model.kernel(model.x, model.tasks, model.x, model.tasks, d2=model.sqdists), []
    noise_var = model.noise.variances(model.tasks)
    gram[np.diag_indices_from(gram)] += noise_var
    chol = numerics.cholesky(gram, model.jitter)
    alpha = numerics.solve_psd(chol, model.targets)
    mll = -0.5 * float(model.targets @ alpha) - 0.5 * numerics.log_det(chol) - 0.5 * n * _LOG_2PI
    if not with_grad:
        return mll, None
    w = np.outer(alpha, alpha) - numerics.inverse(chol)
    grad = [0.5 * float(np.sum(w * g)) for g in grads]
    w_diag = np.diag(w)
    # d(sigma_t^2)/d(log sigma_t) = 2 sigma_t^2 on that arm's diagonal entries
    if model.tied_noise:
        grad.append(float(np.sum(w_diag * noise_var)))
    else:
        for arm in (0, 1):
            rows = model.tasks == arm
            grad.append(float(np.sum(w_diag[rows] * noise_var[rows])))
    return mll, np.array(grad)


def log_marginal_likelihood(model: GpModel) -> float:
    """``-1/2 y^T alpha - 1/2 log det(M_N + Sigma_N) - n/2 log 2 pi``."""
    return _mll_terms(model, with_grad=False)[0]


def mll_gradient(model: GpModel) -> np.ndarray:
    """Analytic gradient w.r.t. ``model.theta`` via ``1/2 tr((aa^T - C^-1) dC)``."""
    return _mll_terms(model, with_grad=True)[1]


def mll_and_gradient(model: GpModel) -> tuple[float, np.ndarray]:
    return _mll_terms(model, with_grad=True)


def median_lengthscale(x: np.ndarray) -> float:
    if x.shape[0] < 2:
        return 1.0
    sample = x if x.shape[0] <= 2000 else x[:: x.shape[0] // 2000 + 1]
    med = float(np.median(pdist(sample)))
    return med if med > 0 else 1.0


def _initial_thetas(model: GpModel, opt: OptimizerConfig) -> list[np.ndarray]:
    rng = np.random.default_rng(opt.seed)
    base = model.theta.copy()
    ell = math.log(median_lengthscale(model.x))
    for i, name in enumerate(model.param_names):
        if name.endswith("log_lengthscale"):
            base[i] = ell
    starts = [base]
    for _ in range(opt.restarts - 1):
        starts.append(rng.uniform(-1.0, 1.0, size=base.size))
    return starts


def _gradient_ascent(model: GpModel, theta0: np.ndarray, opt: OptimizerConfig):
    scale = 1.0 / max(model.n, 1)
    theta = np.clip(theta0, -_PARAM_BOUND, _PARAM_BOUND)
    value, grad = mll_and_gradient(model.with_theta(theta))
    value, grad = value * scale, grad * scale
    it = 0
    for it in range(1, opt.max_iters + 1):
        if np.max(np.abs(grad)) <= opt.grad_tol:
            return theta, value / scale, grad / scale, it, True
        step = opt.step_size
        while True:
            candidate = np.clip(theta + step * grad, -_PARAM_BOUND, _PARAM_BOUND)
            try:
                new_value, new_grad = mll_and_gradient(model.with_theta(candidate))
                new_value, new_grad = new_value * scale, new_grad * scale
            except NotPositiveDefinite:
                new_value = -np.inf
            if new_value >= value:
                break
            step *= 0.5
            if step < 1e-12:
                # no ascent direction left at float precision: a stationary point
                return theta, value / scale, grad / scale, it, True
        theta, value, grad = candidate, new_value, new_grad
    return theta, value / scale, grad / scale, it, bool(np.max(np.abs(grad)) <= opt.grad_tol)


def _lbfgs(model: GpModel, theta0: np.ndarray, opt: OptimizerConfig):
    scale = 1.0 / max(model.n, 1)
    count = {"evals": 0}

    def objective(theta):
        count["evals"] += 1
        try:
            value, grad = mll_and_gradient(model.with_theta(theta))
        except NotPositiveDefinite:
            return 1e10, np.zeros_like(theta)
        return -value * scale, -grad * scale

    bounds = [(-_PARAM_BOUND, _PARAM_BOUND)] * theta0.size
    result = scipy.optimize.minimize(
        objective,
        np.clip(theta0, -_PARAM_BOUND, _PARAM_BOUND),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": opt.max_iters, "gtol": opt.grad_tol},
    )
    theta = result.x
    value, grad = mll_and_gradient(model.with_theta(theta))
    return theta, value, grad, int(result.nit), bool(np.max(np.abs(grad * scale)) <= opt.grad_tol or result.success)


def fit(model: GpModel, optimizer: OptimizerConfig | None = None) -> GpModel:
    """Maximise the marginal likelihood over restarts; deterministic given the seed.

    Restart 0 starts from the current hyperparameters with every
    lengthscale at the median pairwise distance; later restarts draw all
    log-hyperparameters uniformly from [-1, 1].
    """
    opt = optimizer or OptimizerConfig()
    if model.n < 2:
        raise ValueError("fitting needs at least two training points")
    if not isinstance(model.kernel, NaiveKernel) and len(set(model.tasks.tolist())) < 2:
        raise ValueError("both treatment arms must be present")
    run = _lbfgs if opt.method == "lbfgs" else _gradient_ascent
    best = None
    failures = 0
    mlls = []
    for restart, theta0 in enumerate(_initial_thetas(model, opt)):
        try:
            theta, value, grad, iters, converged = run(model, theta0, opt)
        except NotPositiveDefinite:
            failures += 1
            mlls.append(float("nan"))
            continue
        mlls.append(value)
        log.debug("restart %d: mll=%.4f |grad|=%.2e iters=%d", restart, value, np.max(np.abs(grad)), iters)
        if best is None or value > best[1]:
            best = (theta, value, grad, iters, converged, restart)
    if best is None:
        raise AllRestartsFailed(f"all {opt.restarts} restarts hit a non-positive-definite covariance")
    theta, value, grad, iters, converged, restart = best
    report = FitReport(value, float(np.max(np.abs(grad))), iters, restart, converged, failures, tuple(mlls))
    return replace(model.with_theta(theta), report=report)


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Cached factorisation of ``M_N + Sigma_N`` and ``alpha = (M_N + Sigma_N)^{-1} y_N``."""

    model: GpModel
    chol: numerics.CholeskyFactor
    alpha: np.ndarray


def posterior(model: GpModel) -> PosteriorState:
    if model.n == 0:
        return PosteriorState(model, numerics.CholeskyFactor(np.zeros((0, 0))), np.zeros(0))
    chol = numerics.cholesky(model.covariance(), model.jitter)
    return PosteriorState(model, chol, numerics.solve_psd(chol, model.targets))


@dataclass(frozen=True)
class CatePrediction:
    """Posterior of the CATE gap and the debiased CATE at query points."""

    mean_gap: np.ndarray
    std: np.ndarray
    mean_cate: np.ndarray
    credible_low: np.ndarray
    credible_high: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.credible_high - self.credible_low


def cross_covariance(state: PosteriorState, x) -> np.ndarray:
    """``k_N(x)``: covariance of each training point with the CATE task at ``x``."""
    model = state.model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return model.kernel(model.x, model.tasks, x, np.full(x.shape[0], CATE))


def posterior_gap(state: PosteriorState, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the CATE gap at each row of ``x``."""
    model = state.model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    prior = model.kernel.diag(x, np.full(x.shape[0], CATE))
    if model.n == 0:
        return np.zeros(x.shape[0]), prior
    kn = cross_covariance(state, x)
    mean = kn.T @ state.alpha
    v = numerics.solve_lower(state.chol, kn)
    var = prior - np.sum(v * v, axis=0)
    if np.any(var < -VARIANCE_CLAMP):
        worst = float(var.min())
        raise NegativeVariance(f"posterior variance {worst:.3e} below -{VARIANCE_CLAMP:g}")
    return mean, np.maximum(var, 0.0)


def predict(
    state: PosteriorState,
    obs_model: ObservationalModel | None,
    x,
    z: float = Z_95,
) -> CatePrediction:
    """Debiased CATE ``omega_hat(x) + gap(x)`` with ``+- z * std`` credible intervals."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean, var = posterior_gap(state, x)
    std = np.sqrt(var)
    offset = np.zeros(x.shape[0]) if obs_model is None else obs_model.predict_gap(x)
    cate = offset + mean
    return CatePrediction(mean, std, cate, cate - z * std, cate + z * std)


def fit_variant(
    variant: str,
    data: PseudoOutcomes,
    propensity: PropensityModel,
    optimizer: OptimizerConfig | None = None,
    jitter: Sequence[float] = numerics.DEFAULT_JITTER,
    learn_scale: bool | tuple[bool, bool] = True,
) -> GpModel:
    model = GpModel.from_pseudo(variant, data, propensity, learn_scale=learn_scale)
    model = replace(model, jitter=tuple(jitter))
    return fit(model, optimizer)
