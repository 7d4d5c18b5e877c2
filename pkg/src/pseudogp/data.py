"""Datasets, CSV ingestion, propensity scores and observational models."""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import (
    DegenerateArm,
    OverlapViolation,
    ParseError,
    SchemaError,
    ValidationError,
)


class Environment(str, Enum):
    OBSERVATIONAL = "observational"
    EXPERIMENTAL = "experimental"


@dataclass(frozen=True)
class Dataset:
    """Covariates, binary treatments and outcomes from one environment.

    ``outcomes`` is ``None`` for covariate-only sources such as the IHDP
    covariate table, whose outcomes are always simulated.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray | None
    environment: Environment = Environment.OBSERVATIONAL
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.array(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError(f"covariates must be a non-empty n x d matrix, got shape {x.shape}")
        n = x.shape[0]
        t_raw = np.asarray(self.treatments, dtype=float).ravel()
        if t_raw.shape[0] != n:
            raise ValidationError(f"{t_raw.shape[0]} treatments for {n} rows")
        bad = np.flatnonzero(~np.isin(t_raw, (0.0, 1.0)))
        if bad.size:
            raise ValidationError(f"treatment in row {bad[0]} is {t_raw[bad[0]]!r}, expected 0 or 1")
        bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
        if bad.size:
            raise ValidationError(f"non-finite covariate in row {bad[0]}")
        y = None
        if self.outcomes is not None:
            y = np.array(self.outcomes, dtype=float).ravel()
            if y.shape[0] != n:
                raise ValidationError(f"{y.shape[0]} outcomes for {n} rows")
            bad = np.flatnonzero(~np.isfinite(y))
            if bad.size:
                raise ValidationError(f"non-finite outcome in row {bad[0]}")
            y.setflags(write=False)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValidationError(f"{len(names)} covariate names for {x.shape[1]} columns")
        t = t_raw.astype(np.int64)
        x.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "treatments", t)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "environment", Environment(self.environment))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise SchemaError(f"no covariate column named {name!r}") from None

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.covariates[rows],
            self.treatments[rows],
            None if self.outcomes is None else self.outcomes[rows],
            self.environment,
            self.covariate_names,
        )

    def to_csv(self, path, treatment: str = "t", outcome: str = "y") -> None:
        """Write with a header row; floats use ``repr`` so reloading is exact."""
        header = [treatment, *self.covariate_names]
        if self.outcomes is not None:
            header.append(outcome)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n):
                row = [str(int(self.treatments[i])), *(repr(float(v)) for v in self.covariates[i])]
                if self.outcomes is not None:
                    row.append(repr(float(self.outcomes[i])))
                writer.writerow(row)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    ``covariates=None`` takes every column other than the treatment and
    outcome columns, in file order.
    """

    treatment: str = "t"
    covariates: tuple[str, ...] | None = None
    outcome: str | None = None
    environment: Environment = Environment.OBSERVATIONAL

    @classmethod
    def from_dict(cls, raw: dict) -> "CsvSchema":
        cov = raw.get("covariates")
        return cls(
            treatment=raw.get("treatment", "t"),
            covariates=None if cov is None else tuple(cov),
            outcome=raw.get("outcome"),
            environment=Environment(raw.get("environment", "observational")),
        )


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Read a UTF-8 CSV with a header row into a validated :class:`Dataset`.

    Raises
    ------
    SchemaError
        A column named by the schema is absent.
    ParseError
        A cell is empty or not a number.
    ValidationError
        Non-binary treatment or non-finite value; the message names the
        data row (0-based) and the file line.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        rows = list(reader)

    index = {name: j for j, name in enumerate(header)}
    if schema.treatment not in index:
        raise SchemaError(f"{path}: missing treatment column {schema.treatment!r}")
    if schema.outcome is not None and schema.outcome not in index:
        raise SchemaError(f"{path}: missing outcome column {schema.outcome!r}")
    if schema.covariates is None:
        skip = {schema.treatment, schema.outcome}
        cov_names = [h for h in header if h not in skip]
    else:
        cov_names = list(schema.covariates)
        missing = [c for c in cov_names if c not in index]
        if missing:
            raise SchemaError(f"{path}: missing covariate columns {missing}")
    if not cov_names:
        raise SchemaError(f"{path}: no covariate columns")

    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    wanted = [index[schema.treatment], *(index[c] for c in cov_names)]
    if schema.outcome is not None:
        wanted.append(index[schema.outcome])
    values = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {i} (line {i + 2}) has {len(row)} cells, header has {len(header)}")
        for k, j in enumerate(wanted):
            cell = row[j].strip()
            if not cell:
                raise ParseError(f"{path}: missing value in row {i} (line {i + 2}), column {header[j]!r}")
            try:
                values[i, k] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: malformed cell {cell!r} in row {i} (line {i + 2}), column {header[j]!r}"
                ) from None
        if not np.all(np.isfinite(values[i])):
            raise ValidationError(f"{path}: non-finite value in row {i} (line {i + 2})")
        if values[i, 0] not in (0.0, 1.0):
            raise ValidationError(
                f"{path}: treatment {row[wanted[0]]!r} in row {i} (line {i + 2}) is not binary"
            )

    t = values[:, 0]
    x = values[:, 1 : 1 + len(cov_names)]
    y = values[:, -1] if schema.outcome is not None else None
    return Dataset(x, t, y, schema.environment, tuple(cov_names))


def standardize(ds: Dataset) -> Dataset:
    """Z-score every covariate column; constant columns are only centred."""
    x = ds.covariates
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - x.mean(axis=0)) / sd
    return Dataset(z, ds.treatments, ds.outcomes, ds.environment, ds.covariate_names)


class PropensityModel:
    """Known treatment probability ``pi(x)`` of the randomized arm.

    Use :meth:`constant` or :meth:`tabulated`. Every evaluation checks
    strict overlap ``delta < pi(x) < 1 - delta``.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], overlap_delta: float, value: float | None = None):
        if not 0.0 < overlap_delta < 0.5:
            raise ValueError(f"overlap_delta must lie in (0, 0.5), got {overlap_delta}")
        self._fn = fn
        self.overlap_delta = float(overlap_delta)
        self.value = value

    @classmethod
    def constant(cls, p: float, overlap_delta: float = 0.01) -> "PropensityModel":
        p = float(p)
        model = cls(lambda x: np.full(np.atleast_2d(x).shape[0], p), overlap_delta, value=p)
        model._check(np.array([p]))
        return model

    @classmethod
    def tabulated(cls, fn: Callable[[np.ndarray], np.ndarray], overlap_delta: float = 0.01) -> "PropensityModel":
        return cls(fn, overlap_delta)

    @property
    def is_constant(self) -> bool:
        return self.value is not None

    def _check(self, p: np.ndarray) -> None:
        lo, hi = self.overlap_delta, 1.0 - self.overlap_delta
        bad = np.flatnonzero(~((p > lo) & (p < hi)))
        if bad.size:
            raise OverlapViolation(f"propensity {p[bad[0]]:g} at row {bad[0]} outside ({lo:g}, {hi:g})")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = np.asarray(self._fn(x), dtype=float).reshape(x.shape[0])
        self._check(p)
        return p

    def __repr__(self):
        if self.is_constant:
            return f"PropensityModel.constant({self.value}, overlap_delta={self.overlap_delta})"
        return f"PropensityModel.tabulated({self._fn!r}, overlap_delta={self.overlap_delta})"


class ObservationalModel:
    """Estimate of the observational outcome gap E[Y|x,T=1] - E[Y|x,T=0]."""

    kind = "abstract"

    def predict_gap(self, x) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.predict_gap(x)


class OracleModel(ObservationalModel):
    """Wraps a known closed-form gap, e.g. the simulator's true one."""

    kind = "oracle"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self._fn = fn

    def predict_gap(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self._fn(x), dtype=float).reshape(x.shape[0])


class ZeroModel(ObservationalModel):
    kind = "zero"

    def predict_gap(self, x) -> np.ndarray:
        return np.zeros(np.atleast_2d(x).shape[0])


@dataclass(frozen=True, eq=False)
class RidgeModel(ObservationalModel):
    """Per-arm linear predictors with unpenalised intercepts."""

    intercepts: tuple[float, float]
    slopes: tuple[np.ndarray, np.ndarray]
    lam: float

    kind = "ridge"

    def predict_arm(self, x, t: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.intercepts[t] + x @ self.slopes[t]

    def predict_gap(self, x) -> np.ndarray:
        return self.predict_arm(x, 1) - self.predict_arm(x, 0)

    def to_dict(self) -> dict:
        return {
            "kind": "ridge",
            "lambda": self.lam,
            "intercepts": list(self.intercepts),
            "slopes": [s.tolist() for s in self.slopes],
        }


def fit_observational_ridge(obs: Dataset, lam: float = 1e-3) -> RidgeModel:
    """Fit ``mu_t(x) = c_t + x^T w_t`` by ridge regression on each arm.

    The intercept is not penalised (columns and targets are centred before
    the penalised solve).
    """
    if obs.environment != Environment.OBSERVATIONAL:
        raise ValueError("fit_observational_ridge expects an observational dataset")
    if obs.outcomes is None:
        raise ValidationError("observational dataset has no outcomes")
    if lam < 0:
        raise ValueError("ridge penalty must be non-negative")
    intercepts, slopes = [], []
    for arm in (0, 1):
        rows = obs.treatments == arm
        n_arm = int(rows.sum())
        if n_arm == 0 or (lam == 0 and n_arm < obs.d + 1):
            raise DegenerateArm(f"arm {arm} has {n_arm} rows; need at least {obs.d + 1} without a penalty")
        x = obs.covariates[rows]
        y = obs.outcomes[rows]
        x_mean, y_mean = x.mean(axis=0), y.mean()
        xc, yc = x - x_mean, y - y_mean
        gram = xc.T @ xc + lam * np.eye(obs.d)
        try:
            w = np.linalg.solve(gram, xc.T @ yc)
        except np.linalg.LinAlgError:
            raise DegenerateArm(f"arm {arm}: singular design with lambda={lam}") from None
        slopes.append(w)
        intercepts.append(float(y_mean - x_mean @ w))
    return RidgeModel((intercepts[0], intercepts[1]), (slopes[0], slopes[1]), float(lam))


def log_covering_number(side_lengths: Sequence[float], tau: float) -> float:
    """Natural log of :func:`covering_number_hypercube` without overflow."""
    r = np.asarray(side_lengths, dtype=float).ravel()
    if tau <= 0:
        raise ValueError("covering radius must be positive")
    if np.any(r <= 0):
        raise ValueError("side lengths must be positive")
    return float(np.sum(np.log(np.floor(1.0 + r / tau))))


def covering_number_hypercube(side_lengths: Sequence[float], tau: float) -> int:
    """Integer upper estimate of the tau-covering number of a box.

    Uses ``prod_j floor(1 + r_j / tau)``, which never exceeds the
    volumetric bound ``(1 + r/tau)^d`` and tends to 1 as tau grows.

    Raises
    ------
    OverflowError
        If the count exceeds the largest representable float.
    """
    log_m = log_covering_number(side_lengths, tau)
    if log_m > math.log(sys.float_info.max):
        raise OverflowError(f"covering number exp({log_m:.1f}) exceeds float range")
    r = np.asarray(side_lengths, dtype=float).ravel()
    return math.prod(int(math.floor(1.0 + rj / tau)) for rj in r)
