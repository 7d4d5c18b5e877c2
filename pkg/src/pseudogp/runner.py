"""Replicated experiments: simulate, fit every model, score against the truth.

Each replication derives its own seed from ``(config seed, replication
index)``, so replications are independent and any one of them can be
rerun alone. Results are reduced in replication order, which keeps the
tables deterministic.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import gp, numerics
from .bounds import BoundConfig, uniform_band
from .data import (
    CsvSchema,
    Dataset,
    ObservationalModel,
    OracleModel,
    PropensityModel,
    fit_observational_ridge,
    load_csv,
)
from .exceptions import AllRestartsFailed, ConfigError, ExperimentFailed, NotPositiveDefinite, PseudoGPError
from .pseudo_outcome import ipw_transform
from .simulate import SimConfig, generate, ihdp_surrogate

log = logging.getLogger(__name__)

MODELS = ("ours", "naive", "lcm")
GRIDS = ("in_distribution", "out_of_distribution")
METRIC_COLUMNS = ("model", "grid", "mse", "mse_se", "coverage", "coverage_se", "width", "width_se")
BOUND_COLUMNS = (
    "n_exp", "replications", "whole_coverage", "whole_coverage_se",
    "width_in", "width_in_se", "width_out", "width_out_se",
)  # fmt: skip
MAX_FAILURE_FRACTION = 0.10
#: Jitter schedule for the single retry after a factorisation failure: the
#: default schedule extended by one level.
RETRY_JITTER = (*numerics.DEFAULT_JITTER, 1e-2)
Z_TABLE = 1.96


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a simulation design, the models to fit and how to score them."""

    name: str = "experiment"
    sim: SimConfig = field(default_factory=SimConfig)
    models: tuple[str, ...] = MODELS
    optimizer: gp.OptimizerConfig = field(default_factory=gp.OptimizerConfig)
    learn_scale: bool = False
    omega: str = "oracle"
    ridge_lambda: float = 1e-3
    replications: int = 20
    seed: int = 0
    bound: BoundConfig | None = None
    n_exp_list: tuple[int, ...] = ()
    covariates: str | None = None
    covariate_schema: Mapping | None = None
    output_dir: str = "results"

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1", "replications")
        if not self.models:
            raise ConfigError("at least one model is required", "models")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ConfigError(f"unknown model {bad[0]!r}; choose from {MODELS}", "models")
        if self.omega not in ("oracle", "ridge"):
            raise ConfigError("omega must be 'oracle' or 'ridge'", "omega")
        if any(n < 0 for n in self.n_exp_list):
            raise ConfigError("n_exp_list entries must be >= 0", "n_exp_list")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown setting {key!r}", key)
        if "sim" in raw:
            raw["sim"] = SimConfig.from_dict(raw["sim"])
        if "optimizer" in raw:
            try:
                raw["optimizer"] = gp.OptimizerConfig.from_dict(raw["optimizer"])
            except KeyError as exc:
                raise ConfigError(f"unknown optimizer setting {exc.args[0]!r}", f"optimizer.{exc.args[0]}") from None
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), "optimizer") from None
        if raw.get("bound") is not None:
            raw["bound"] = BoundConfig.from_dict(raw["bound"])
        for key in ("models", "n_exp_list"):
            if key in raw:
                if not isinstance(raw[key], (list, tuple)):
                    raise ConfigError(f"{key} must be a list", key)
                raw[key] = tuple(raw[key])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc), "experiment") from None

    def replication_seed(self, r: int) -> int:
        return int(np.random.SeedSequence([self.seed, r]).generate_state(1)[0])

    def load_covariates(self) -> Dataset | None:
        if self.sim.design == "synthetic":
            return None
        if self.covariates is None:
            return ihdp_surrogate()
        schema = CsvSchema.from_dict(dict(self.covariate_schema or {}))
        return load_csv(self.covariates, schema)


@dataclass(frozen=True)
class MetricRow:
    model: str
    grid: str
    mse: float
    mse_se: float
    coverage: float
    coverage_se: float
    width: float
    width_se: float

    def ci(self, metric: str) -> tuple[float, float]:
        """``value +- 1.96 SE`` for ``mse``, ``coverage`` or ``width``."""
        value, se = getattr(self, metric), getattr(self, f"{metric}_se")
        return value - Z_TABLE * se, value + Z_TABLE * se


@dataclass(frozen=True)
class MetricsTable:
    """Replication means and standard errors per (model, grid)."""

    rows: tuple[MetricRow, ...]
    replications: int
    failures: tuple[tuple[int, str], ...] = ()
    raw: Mapping = field(default_factory=dict, repr=False, compare=False)

    def get(self, model: str, grid: str) -> MetricRow:
        for row in self.rows:
            if row.model == model and row.grid == grid:
                return row
        raise KeyError((model, grid))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for row in self.rows:
                writer.writerow([row.model, row.grid, *(repr(getattr(row, c)) for c in METRIC_COLUMNS[2:])])


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def score(pred: gp.CatePrediction, truth: np.ndarray) -> tuple[float, float, float]:
    """``(mse, coverage, mean width)`` of a prediction against true CATE values."""
    mse = float(np.mean((pred.mean_cate - truth) ** 2))
    covered = (pred.credible_low <= truth) & (truth <= pred.credible_high)
    return mse, float(np.mean(covered)), float(np.mean(pred.width))


def _obs_model(cfg: ExperimentConfig, obs: Dataset, truth) -> ObservationalModel:
    if cfg.omega == "oracle":
        return OracleModel(truth.true_omega_o)
    return fit_observational_ridge(obs, cfg.ridge_lambda)


def _replicate(cfg: ExperimentConfig, r: int, covariates, sim: SimConfig | None = None):
    seed = cfg.replication_seed(r)
    sim = replace(sim or cfg.sim, seed=seed)
    obs, exp, truth = generate(sim, covariates)
    propensity = PropensityModel.constant(sim.treat_p)
    obs_model = _obs_model(cfg, obs, truth)
    optimizer = replace(cfg.optimizer, seed=seed)
    return obs, exp, truth, propensity, obs_model, optimizer


def _fit_with_retry(variant, pseudo, propensity, optimizer, learn_scale) -> gp.PosteriorState:
    """Fit and factorise with the default jitter, retrying once with one more level."""
    try:
        model = gp.fit_variant(variant, pseudo, propensity, optimizer, numerics.DEFAULT_JITTER, learn_scale)
        return gp.posterior(model)
    except (NotPositiveDefinite, AllRestartsFailed) as exc:
        log.warning("%s: factorisation failed (%s); retrying with jitter up to %g", variant, exc, RETRY_JITTER[-1])
    model = gp.fit_variant(variant, pseudo, propensity, optimizer, RETRY_JITTER, learn_scale)
    return gp.posterior(model)


def run_replication(cfg: ExperimentConfig, r: int, covariates=None) -> dict:
    """Metrics ``{(model, grid): (mse, coverage, width)}`` for replication ``r``."""
    obs, exp, truth, propensity, obs_model, optimizer = _replicate(cfg, r, covariates)
    pseudo = ipw_transform(exp, propensity, obs_model)
    grids = {"in_distribution": truth.eval_in, "out_of_distribution": truth.eval_out}
    taus = {name: truth.true_cate(g) for name, g in grids.items()}
    out = {}
    for model in cfg.models:
        state = _fit_with_retry(model, pseudo, propensity, optimizer, cfg.learn_scale)
        for name, g in grids.items():
            out[(model, name)] = score(gp.predict(state, obs_model, g), taus[name])
    return out


def _check_failures(failures, replications):
    if len(failures) > MAX_FAILURE_FRACTION * replications:
        detail = "; ".join(f"replication {r}: {msg}" for r, msg in failures[:3])
        raise ExperimentFailed(f"{len(failures)} of {replications} replications failed ({detail})")


def run_experiment(cfg: ExperimentConfig, progress=None) -> MetricsTable:
    """Run every replication and aggregate ``mean +- SE`` per (model, grid).

    A replication that raises a package error is logged and excluded; the
    run fails with :class:`ExperimentFailed` if more than 10% fail.
    """
    covariates = cfg.load_covariates()
    results: dict[int, dict] = {}
    failures: list[tuple[int, str]] = []
    for r in range(cfg.replications):
        try:
            results[r] = run_replication(cfg, r, covariates)
        except PseudoGPError as exc:
            log.warning("replication %d failed: %s", r, exc)
            failures.append((r, str(exc)))
        if progress:
            progress(r)
    _check_failures(failures, cfg.replications)
    rows = []
    raw = {}
    for model in cfg.models:
        for grid in GRIDS:
            vals = np.array([results[r][(model, grid)] for r in sorted(results)])
            raw[(model, grid)] = vals
            stats_ = [_mean_se(vals[:, j]) for j in range(3)]
            rows.append(MetricRow(model, grid, *stats_[0], *stats_[1], *stats_[2]))
    return MetricsTable(tuple(rows), len(results), tuple(failures), raw)


@dataclass(frozen=True)
class BoundRow:
    n_exp: int
    replications: int
    whole_coverage: float
    whole_coverage_se: float
    width_in: float
    width_in_se: float
    width_out: float
    width_out_se: float


@dataclass(frozen=True)
class BoundTable:
    rows: tuple[BoundRow, ...]
    failures: tuple[tuple[int, int, str], ...] = ()
    raw: Mapping = field(default_factory=dict, repr=False, compare=False)

    def get(self, n_exp: int) -> BoundRow:
        for row in self.rows:
            if row.n_exp == n_exp:
                return row
        raise KeyError(n_exp)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(BOUND_COLUMNS)
            for row in self.rows:
                writer.writerow([repr(getattr(row, c)) for c in BOUND_COLUMNS])


def bound_replication(cfg: ExperimentConfig, r: int, n_exp: int, covariates=None) -> tuple[bool, float, float]:
    """``(whole-function coverage, mean width in, mean width out)`` for one replication.

    With ``n_exp = 0`` nothing is fitted and the band comes from the prior.
    """
    sim = replace(cfg.sim, n_exp=n_exp)
    obs, exp, truth, propensity, obs_model, optimizer = _replicate(cfg, r, covariates, sim)
    if n_exp == 0:
        kernel = gp.default_kernel("ours", propensity, cfg.learn_scale)
        empty = np.zeros((0, obs.d))
        state = gp.posterior(gp.GpModel(kernel, gp.NoiseParams(), empty, [], []))
    else:
        pseudo = ipw_transform(exp, propensity, obs_model)
        state = _fit_with_retry("ours", pseudo, propensity, optimizer, cfg.learn_scale)
    base = cfg.bound or BoundConfig()
    bcfg = replace(base, support_low=tuple(truth.obs_box[0]), support_high=tuple(truth.obs_box[1]))
    covered = True
    widths = []
    for g in (truth.eval_in, truth.eval_out):
        report = uniform_band(state, obs_model, bcfg, g)
        covered &= bool(report.contains(truth.true_cate(g)).all())
        widths.append(float(np.mean(2.0 * report.half_width)))
    return covered, widths[0], widths[1]


def run_bound_study(cfg: ExperimentConfig, progress=None) -> BoundTable:
    """Whole-function coverage and band widths of the pseudo-outcome model per ``n_exp``."""
    n_list = cfg.n_exp_list or (cfg.sim.n_exp,)
    covariates = cfg.load_covariates()
    rows, failures, raw = [], [], {}
    for n_exp in n_list:
        results = {}
        for r in range(cfg.replications):
            try:
                results[r] = bound_replication(cfg, r, n_exp, covariates)
            except PseudoGPError as exc:
                log.warning("n_exp=%d replication %d failed: %s", n_exp, r, exc)
                failures.append((n_exp, r, str(exc)))
            if progress:
                progress(n_exp, r)
        _check_failures([f for f in failures if f[0] == n_exp], cfg.replications)
        vals = np.array([results[r] for r in sorted(results)], dtype=float)
        raw[n_exp] = vals
        cov, w_in, w_out = (_mean_se(vals[:, j]) for j in range(3))
        rows.append(BoundRow(n_exp, len(results), *cov, *w_in, *w_out))
    return BoundTable(tuple(rows), tuple(failures), raw)


def write_metrics(table: MetricsTable, output_dir) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    table.to_csv(path)
    return path


def write_bound_table(table: BoundTable, output_dir) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bound_coverage.csv"
    table.to_csv(path)
    return path
