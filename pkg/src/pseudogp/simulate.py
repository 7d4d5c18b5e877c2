"""Data-generating processes for the synthetic, IHDP and robustness designs.

Every design shares one structure: an outcome regression ``mu(x, t)`` that
holds in the observational environment, and an experimental environment
whose outcomes additionally carry ``f_t(x)`` drawn from a GP prior. The
true CATE is therefore ``omega_o(x) + f_1(x) - f_0(x)``.

Random streams are split per purpose (covariates, treatments, noise, GP
draws, coefficients, ...) from one seed, so switching off one ingredient
leaves every other draw unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.stats import qmc

from . import numerics
from .data import Dataset, Environment, standardize
from .exceptions import ConfigError, SchemaError
from .kernels import SEKernel, sqdist

DESIGNS = ("synthetic", "ihdp", "robustness")

#: Terms available to the synthetic outcome polynomial.
POLY_TERMS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "const": lambda x, t: np.ones(x.shape[0]),
    "t": lambda x, t: t,
    "x": lambda x, t: x.sum(axis=1),
    "t_x": lambda x, t: t * x.sum(axis=1),
    "x1": lambda x, t: x[:, 0],
    "t_x1": lambda x, t: t * x[:, 0],
    "x1_sq": lambda x, t: x[:, 0] ** 2,
    "t_x1_sq": lambda x, t: t * x[:, 0] ** 2,
}

DEFAULT_POLY = {"x": 1.0, "t_x": 1.0, "t_x1_sq": 1.0}

_STREAMS = ("obs_x", "exp_x", "obs_t", "exp_t", "noise", "gp", "coef", "sq_coef", "grid", "eval")


@dataclass(frozen=True)
class SimConfig:
    """Declarative description of one simulated dataset pair.

    ``d`` applies to the synthetic design only (IHDP-style designs take the
    covariate table's width). ``poly`` maps :data:`POLY_TERMS` names to
    coefficients of the synthetic outcome model.
    """

    design: str = "synthetic"
    d: int = 1
    n_obs: int = 1000
    n_exp: int = 200
    treat_p: float = 0.5
    gp_prior: SEKernel = field(default_factory=SEKernel)
    noise_sigma0: float = 0.5
    seed: int = 0
    n_eval: int = 1000
    n_fill: int = 512
    poly: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_POLY))
    coef_prob: float = 0.3
    sq_coef_prob: float = 0.3
    standardize: bool = True
    smoker_column: str = "smoker"
    male_column: str = "male"
    weight_base: float = 0.8

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {DESIGNS}, got {self.design!r}", "design")
        if self.n_obs < 1:
            raise ConfigError("n_obs must be >= 1", "n_obs")
        if self.n_exp < 0:
            raise ConfigError("n_exp must be >= 0", "n_exp")
        if not 0.0 < self.treat_p < 1.0:
            raise ConfigError("treat_p must lie in (0, 1)", "treat_p")
        if self.d < 1:
            raise ConfigError("d must be >= 1", "d")
        unknown = set(self.poly) - set(POLY_TERMS)
        if unknown:
            raise ConfigError(f"unknown polynomial terms {sorted(unknown)}", "poly")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SimConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown simulation setting {key!r}", f"sim.{key}")
        try:
            if "gp_prior" in raw:
                raw["gp_prior"] = SEKernel.from_dict(raw["gp_prior"])
            return cls(**raw)
        except ConfigError as exc:
            raise ConfigError(str(exc), f"sim.{exc.key}") from None
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(str(exc), "sim") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gp_prior"] = self.gp_prior.to_dict()
        out["poly"] = dict(self.poly)
        return out

    def streams(self) -> dict[str, np.random.Generator]:
        children = np.random.SeedSequence(self.seed).spawn(len(_STREAMS))
        return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


class GpPriorSample:
    """A GP prior draw realised on a grid.

    Grid points return the drawn values exactly; other points use the
    posterior mean given the grid values.
    """

    def __init__(self, kernel: SEKernel, grid: np.ndarray, values: np.ndarray, chol: numerics.CholeskyFactor | None):
        self.kernel = kernel
        self.grid = grid
        self.values = values
        self._chol = chol
        self._index = {row.tobytes(): i for i, row in enumerate(grid)}
        self._weights = None

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.grid.shape[1]:
            raise ValueError(f"query dimension {x.shape[1]} != grid dimension {self.grid.shape[1]}")
        out = np.empty(x.shape[0])
        hits = np.array([self._index.get(row.tobytes(), -1) for row in x], dtype=np.int64)
        on_grid = hits >= 0
        out[on_grid] = self.values[hits[on_grid]]
        if not on_grid.all():
            off = ~on_grid
            if self._chol is None:
                out[off] = 0.0
            else:
                if self._weights is None:
                    self._weights = numerics.solve_psd(self._chol, self.values)
                out[off] = self.kernel(x[off], self.grid) @ self._weights
        return out


def sample_gp_prior(kernel: SEKernel, grid, seed, size: int | None = None):
    """Draw ``f ~ GP(0, kernel)`` jointly on ``grid``.

    ``seed`` is an int or a ``numpy.random.Generator``. Returns one
    :class:`GpPriorSample`, or a list of ``size`` independent draws sharing
    one factorisation.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = 1 if size is None else size
    if kernel.variance == 0.0:
        draws = [GpPriorSample(kernel, grid, np.zeros(grid.shape[0]), None) for _ in range(count)]
    else:
        chol = numerics.cholesky(kernel(grid), numerics.DEFAULT_JITTER)
        z = rng.standard_normal((grid.shape[0], count))
        values = chol.lower @ z
        draws = [GpPriorSample(kernel, grid, values[:, i].copy(), chol) for i in range(count)]
    return draws[0] if size is None else draws


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Closed-form truth behind a simulated dataset pair."""

    outcome_mean: Callable[[np.ndarray, np.ndarray], np.ndarray]
    f0: GpPriorSample
    f1: GpPriorSample
    obs_box: tuple[np.ndarray, np.ndarray]
    exp_box: tuple[np.ndarray, np.ndarray]
    eval_in: np.ndarray
    eval_out: np.ndarray
    coefficients: dict = field(default_factory=dict)

    def true_omega_o(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        return self.outcome_mean(x, np.ones(n)) - self.outcome_mean(x, np.zeros(n))

    def gap(self, x) -> np.ndarray:
        return self.f1(x) - self.f0(x)

    def true_cate(self, x) -> np.ndarray:
        return self.true_omega_o(x) + self.gap(x)

    def experimental_mean(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.asarray(t, dtype=float)
        return self.outcome_mean(x, t) + np.where(t == 1, self.f1(x), self.f0(x))

    def sidecar(self) -> dict:
        """JSON-ready evaluation grids with true CATE values and support boxes."""
        return {
            "obs_box": {"low": self.obs_box[0].tolist(), "high": self.obs_box[1].tolist()},
            "exp_box": {"low": self.exp_box[0].tolist(), "high": self.exp_box[1].tolist()},
            "grids": {
                name: {"x": grid.tolist(), "tau": self.true_cate(grid).tolist()}
                for name, grid in (("in_distribution", self.eval_in), ("out_of_distribution", self.eval_out))
            },
            "coefficients": {k: np.asarray(v).tolist() for k, v in self.coefficients.items()},
        }


def _halton(n: int, low, high, rng: np.random.Generator) -> np.ndarray:
    low, high = np.asarray(low, float), np.asarray(high, float)
    if n <= 0:
        return np.zeros((0, low.size))
    sampler = qmc.Halton(d=low.size, scramble=True, seed=rng)
    return qmc.scale(sampler.random(n), low, high)


def _outside_box(n: int, outer, inner, rng: np.random.Generator) -> np.ndarray:
    """Quasi-random points of the outer box that avoid the inner box."""
    if n <= 0:
        return np.zeros((0, np.asarray(outer[0]).size))
    sampler = qmc.Halton(d=np.asarray(outer[0]).size, scramble=True, seed=rng)
    kept: list[np.ndarray] = []
    total = 0
    while total < n:
        pts = qmc.scale(sampler.random(max(2 * n, 64)), outer[0], outer[1])
        inside = np.all((pts >= inner[0]) & (pts <= inner[1]), axis=1)
        pts = pts[~inside]
        kept.append(pts)
        total += pts.shape[0]
    return np.vstack(kept)[:n]


def polynomial_mean(poly: Mapping[str, float]) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    terms = [(POLY_TERMS[name], float(c)) for name, c in poly.items() if c != 0.0]

    def mean(x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.asarray(t, dtype=float)
        out = np.zeros(x.shape[0])
        for fn, c in terms:
            out = out + c * fn(x, t)
        return out

    return mean


def _outcomes(truth: GroundTruth, x, t, experimental: bool, sigma: float, rng) -> np.ndarray:
    mean = truth.experimental_mean(x, t) if experimental else truth.outcome_mean(x, t)
    return mean + sigma * rng.standard_normal(x.shape[0])


def generate_synthetic(cfg: SimConfig) -> tuple[Dataset, Dataset, GroundTruth]:
    """Uniform covariates on [-3, 3]^d (observational) and [-1, 1]^d (experimental)."""
    rs = cfg.streams()
    d = cfg.d
    obs_box = (np.full(d, -3.0), np.full(d, 3.0))
    exp_box = (np.full(d, -1.0), np.full(d, 1.0))
    x_obs = rs["obs_x"].uniform(-3.0, 3.0, size=(cfg.n_obs, d))
    x_exp = rs["exp_x"].uniform(-1.0, 1.0, size=(cfg.n_exp, d))
    t_obs = rs["obs_t"].binomial(1, 0.5, size=cfg.n_obs)
    t_exp = rs["exp_t"].binomial(1, cfg.treat_p, size=cfg.n_exp)
    eval_in = _halton(cfg.n_eval, *exp_box, rs["eval"])
    eval_out = _outside_box(cfg.n_eval, obs_box, exp_box, rs["eval"])
    fill = _halton(cfg.n_fill, *obs_box, rs["grid"])
    grid = np.unique(np.vstack([x_exp, eval_in, eval_out, fill]), axis=0)
    f0, f1 = sample_gp_prior(cfg.gp_prior, grid, rs["gp"], size=2)
    truth = GroundTruth(
        polynomial_mean(cfg.poly), f0, f1, obs_box, exp_box, eval_in, eval_out, {"poly": dict(cfg.poly)}
    )
    noise = rs["noise"]
    y_obs = _outcomes(truth, x_obs, t_obs, False, cfg.noise_sigma0, noise)
    y_exp = _outcomes(truth, x_exp, t_exp, True, cfg.noise_sigma0, noise) if cfg.n_exp else None
    obs = Dataset(x_obs, t_obs, y_obs, Environment.OBSERVATIONAL)
    exp = _experimental(x_exp, t_exp, y_exp, d)
    return obs, exp, truth


def _experimental(x, t, y, d, names=()) -> Dataset | None:
    if x.shape[0] == 0:
        return None
    return Dataset(x, t, y, Environment.EXPERIMENTAL, names)


def selection_weights(covariates: Dataset, smoker: str, male: str, base: float = 0.8) -> np.ndarray:
    """``base ** (1{smoker} + 1{male})`` per row, unnormalised."""
    try:
        s = covariates.column(smoker) > 0.5
        m = covariates.column(male) > 0.5
    except SchemaError as exc:
        raise SchemaError(f"IHDP indicator column missing: {exc}") from None
    return base ** (s.astype(float) + m.astype(float))


def _sparse_coefficients(rng: np.random.Generator, d: int, prob: float) -> np.ndarray:
    """Two length-d vectors with entries ``Z * N``, ``Z ~ Ber(prob)``, ``N ~ N(0, 1)``."""
    z = rng.binomial(1, prob, size=(2, d))
    return z * rng.standard_normal((2, d))


def _linear_quadratic_mean(beta: np.ndarray, gamma: np.ndarray):
    def mean(x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.asarray(t, dtype=float)
        x2 = x * x
        return x @ beta[0] + x2 @ gamma[0] + t * (x @ beta[1] + x2 @ gamma[1])

    return mean


def generate_ihdp(cfg: SimConfig, covariates: Dataset, squared_terms: bool = False):
    """Semi-synthetic design over an IHDP-style covariate table.

    Observational rows (covariates and recorded treatment) are drawn
    uniformly with replacement; experimental rows are drawn with
    probabilities proportional to :func:`selection_weights` and get
    ``T ~ Ber(treat_p)``. Outcomes follow a sparse linear model
    (plus sparse squared terms when ``squared_terms``).
    """
    rs = cfg.streams()
    weights = selection_weights(covariates, cfg.smoker_column, cfg.male_column, cfg.weight_base)
    probs = weights / weights.sum()
    table = standardize(covariates) if cfg.standardize else covariates
    x_all = table.covariates
    n_rows, d = x_all.shape

    obs_rows = rs["obs_x"].integers(0, n_rows, size=cfg.n_obs)
    exp_rows = rs["exp_x"].choice(n_rows, size=cfg.n_exp, replace=True, p=probs)
    x_obs, t_obs = x_all[obs_rows], covariates.treatments[obs_rows]
    x_exp = x_all[exp_rows]
    t_exp = rs["exp_t"].binomial(1, cfg.treat_p, size=cfg.n_exp)

    beta = _sparse_coefficients(rs["coef"], d, cfg.coef_prob)
    gamma = _sparse_coefficients(rs["sq_coef"], d, cfg.sq_coef_prob) if squared_terms else np.zeros((2, d))

    grid = np.unique(x_all, axis=0)
    f0, f1 = sample_gp_prior(cfg.gp_prior, grid, rs["gp"], size=2)
    eval_in = x_all[rs["eval"].choice(n_rows, size=cfg.n_eval, replace=True, p=probs)]
    eval_out = x_all[rs["eval"].integers(0, n_rows, size=cfg.n_eval)]
    box = (x_all.min(axis=0), x_all.max(axis=0))
    truth = GroundTruth(
        _linear_quadratic_mean(beta, gamma), f0, f1, box, box, eval_in, eval_out,
        {"beta": beta, "gamma": gamma, "selection_weights": weights},
    )  # fmt: skip
    noise = rs["noise"]
    y_obs = _outcomes(truth, x_obs, t_obs, False, cfg.noise_sigma0, noise)
    y_exp = _outcomes(truth, x_exp, t_exp, True, cfg.noise_sigma0, noise) if cfg.n_exp else None
    names = table.covariate_names
    obs = Dataset(x_obs, t_obs, y_obs, Environment.OBSERVATIONAL, names)
    exp = _experimental(x_exp, t_exp, y_exp, d, names)
    return obs, exp, truth


def generate_robustness(cfg: SimConfig, covariates: Dataset):
    """IHDP design with sparse squared terms, so a linear fit leaves a non-GP gap."""
    return generate_ihdp(cfg, covariates, squared_terms=True)


def generate(cfg: SimConfig, covariates: Dataset | None = None):
    """Dispatch on ``cfg.design``; IHDP-style designs default to the surrogate table."""
    if cfg.design == "synthetic":
        return generate_synthetic(cfg)
    covariates = covariates if covariates is not None else ihdp_surrogate()
    if cfg.design == "ihdp":
        return generate_ihdp(cfg, covariates)
    return generate_robustness(cfg, covariates)


N_IHDP, D_IHDP, N_CONTINUOUS = 985, 28, 7


def ihdp_surrogate(seed: int = 20240501) -> Dataset:
    """Synthetic stand-in for the IHDP covariate table.

    985 rows, 28 covariates: 7 correlated continuous columns ``c1..c7`` and
    21 binary columns ``b1..b19``, ``smoker`` and ``male``. The recorded
    treatment depends on the covariates, as in a confounded observational
    record.
    """
    rng = np.random.default_rng(seed)
    n = N_IHDP
    n_bin = D_IHDP - N_CONTINUOUS
    mix = rng.normal(size=(N_CONTINUOUS + n_bin, N_CONTINUOUS + n_bin)) * 0.3
    mix[np.diag_indices_from(mix)] = 1.0
    latent = rng.standard_normal((n, N_CONTINUOUS + n_bin)) @ mix.T
    cont = latent[:, :N_CONTINUOUS]
    cont[:, 0] = np.exp(0.4 * cont[:, 0])  # one skewed column, like birth weight
    rates = np.linspace(0.1, 0.6, n_bin)
    rates[-2:] = (0.13, 0.51)  # smoker, male
    thresholds = np.quantile(latent[:, N_CONTINUOUS:], 1.0 - rates, axis=0).diagonal()
    binary = (latent[:, N_CONTINUOUS:] > thresholds).astype(float)
    x = np.hstack([cont, binary])
    names = tuple(f"c{j + 1}" for j in range(N_CONTINUOUS)) + tuple(f"b{j + 1}" for j in range(n_bin - 2))
    names += ("smoker", "male")
    score = 0.6 * cont[:, 1] - 0.4 * binary[:, 0] + 0.5 * binary[:, 3] - 0.8
    t = rng.binomial(1, 1.0 / (1.0 + np.exp(-score)))
    return Dataset(x, t, None, Environment.OBSERVATIONAL, names)


def gp_grid_points(truth: GroundTruth) -> np.ndarray:
    return truth.f0.grid


def pairwise_min_distance(x: np.ndarray) -> float:
    d2 = sqdist(x, x)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))
