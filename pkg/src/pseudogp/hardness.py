"""Spike-mixture alternatives and the power collapse of an equivalence test.

A base distribution ``P`` has its CATE gap well inside a pair of bands.
For sample size ``n`` the mixture ``Q_n = (1 - 1/n) P + (1/n) R_n`` puts a
small extra component ``R_n`` on a box of base probability at most
``1/n^2``, where outcomes ``Y = M (2T - 1)`` give a CATE of ``2M``. So
``Q_n`` leaves the bands while staying within total variation ``1/n`` of
``P``, and any test sees almost the same data under both.

The lab runs one concrete test (two one-sided t-tests per covariate bin,
combined by intersection-union) and measures how close its rejection
rates under ``P`` and ``Q_n`` are. It illustrates the phenomenon for this
test only; it proves nothing about other tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .exceptions import InsufficientData, RegionTooSmall
from .pseudo_outcome import ipw_weight

MIN_BIN_SIZE = 5

Band = float | Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BaseDistribution:
    """Uniform covariates on a box, ``T ~ Ber(propensity)`` and bounded outcomes.

    ``Y = U + cate * T`` with ``U ~ U(-noise, noise)``, so the CATE is the
    constant ``cate`` and ``|Y| <= noise + |cate|``.
    """

    low: tuple[float, ...] = (-1.0,)
    high: tuple[float, ...] = (1.0,)
    propensity: float = 0.5
    noise: float = 0.5
    cate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(float(v) for v in np.atleast_1d(self.low)))
        object.__setattr__(self, "high", tuple(float(v) for v in np.atleast_1d(self.high)))
        if len(self.low) != len(self.high) or any(h <= lo for lo, h in zip(self.low, self.high)):
            raise ValueError("support box must have matching, positive sides")
        if not 0.0 < self.propensity < 1.0:
            raise ValueError("propensity must lie in (0, 1)")

    @property
    def d(self) -> int:
        return len(self.low)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.low) + np.asarray(self.high))

    @property
    def volume(self) -> float:
        return float(np.prod(np.asarray(self.high) - np.asarray(self.low)))

    @property
    def outcome_bound(self) -> float:
        return self.noise + abs(self.cate)

    def box_probability(self, low, high) -> float:
        lo = np.maximum(np.asarray(low, float), self.low)
        hi = np.minimum(np.asarray(high, float), self.high)
        return float(np.prod(np.clip(hi - lo, 0.0, None)) / self.volume)

    def sample(self, n: int, rng: np.random.Generator):
        x = rng.uniform(self.low, self.high, size=(n, self.d))
        t = rng.binomial(1, self.propensity, size=n)
        y = rng.uniform(-self.noise, self.noise, size=n) + self.cate * t
        return x, t, y


def spike_box(base: BaseDistribution, target: float, max_halvings: int = 2000) -> tuple[np.ndarray, np.ndarray, float]:
    """Cube around the support centre whose base probability is at most ``target``.

    Bisects on the side length between 0 and the widest side and returns
    the largest side found whose probability stays under ``target``.
    Raises :class:`RegionTooSmall` if the box collapses to zero width in
    floating point first.
    """
    center = base.center
    lo_side, hi_side = 0.0, float(np.max(np.asarray(base.high) - np.asarray(base.low)))

    def prob(side: float) -> float:
        return base.box_probability(center - side / 2, center + side / 2)

    if prob(hi_side) <= target:
        side = hi_side
    else:
        for _ in range(max_halvings):
            mid = 0.5 * (lo_side + hi_side)
            if prob(mid) <= target:
                lo_side = mid
            else:
                hi_side = mid
            if hi_side - lo_side <= 1e-12 * hi_side:
                break
        side = lo_side
    low, high = center - side / 2, center + side / 2
    if side == 0.0 or np.any(high <= low):
        raise RegionTooSmall(f"no box of positive width has base probability <= {target:g}")
    return low, high, prob(side)


@dataclass(frozen=True)
class SpikeMixture:
    """``(1 - w) P + w R``: the spike ``R`` puts ``Y = M (2T - 1)`` on a small box."""

    base: BaseDistribution
    spike_low: np.ndarray
    spike_high: np.ndarray
    spike_prob: float
    mix_weight: float
    outcome_bound: float

    @property
    def spike_cate(self) -> float:
        return 2.0 * self.outcome_bound

    def sample(self, n: int, rng: np.random.Generator):
        """``(x, t, y, from_spike)`` for ``n`` draws."""
        x, t, y = self.base.sample(n, rng)
        spike = rng.random(n) < self.mix_weight
        k = int(spike.sum())
        if k:
            x[spike] = rng.uniform(self.spike_low, self.spike_high, size=(k, self.base.d))
            t[spike] = rng.binomial(1, self.base.propensity, size=k)
            y[spike] = self.outcome_bound * (2 * t[spike] - 1)
        return x, t, y, spike

    def spike_conditional_cate(self) -> float:
        """CATE of the mixture at a point inside the spike box."""
        spike_density = self.mix_weight / float(np.prod(self.spike_high - self.spike_low))
        base_density = (1.0 - self.mix_weight) / self.base.volume
        total = spike_density + base_density
        return (spike_density * self.spike_cate + base_density * self.base.cate) / total


def build_mixture(base: BaseDistribution, n: int, M: float, seed=None, mix_weight: float | None = None) -> SpikeMixture:
    """Spike mixture for sample size ``n``: weight ``1/n``, spike probability ``<= 1/n^2``.

    ``seed`` is accepted for interface symmetry; the construction is
    deterministic.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if M < base.outcome_bound:
        raise ValueError(f"M={M} does not bound the base outcomes (|Y| <= {base.outcome_bound})")
    w = 1.0 / n if mix_weight is None else float(mix_weight)
    if not 0.0 <= w < 1.0:
        raise ValueError("mix_weight must lie in [0, 1)")
    low, high, eps = spike_box(base, 1.0 / n**2)
    return SpikeMixture(base, low, high, eps, w, float(M))


def tv_coupling_bound(n: int, mix_weight: float) -> float:
    """``1 - (1 - w)^n``: total variation between ``P^n`` and ``Q^n`` is at most this."""
    return 1.0 - (1.0 - mix_weight) ** n


def _band_values(band: Band, x: np.ndarray) -> np.ndarray:
    if callable(band):
        return np.asarray(band(x), dtype=float)
    return np.full(x.shape[0], float(band))


@dataclass(frozen=True)
class EquivalenceTest:
    """Binned two-one-sided t-tests of ``lower < gap < upper``.

    The null is "the gap leaves the bands somewhere". Each bin (equal
    widths along the first covariate) tests its mean pseudo-outcome
    residual against the tightest band values seen in the bin, and the
    test rejects only when every bin rejects both one-sided nulls at
    level ``alpha``. Intersection-union keeps the overall level at
    ``alpha``.
    """

    alpha: float
    lower: Band
    upper: Band
    support: tuple[float, float] = (-1.0, 1.0)
    bins: int = 4
    propensity: float = 0.5
    obs_gap: Callable[[np.ndarray], np.ndarray] | None = None

    def statistics(self, x, t, y) -> list[tuple[float, float, float, int]]:
        """Per bin ``(mean, stderr, critical value, count)``; raises :class:`InsufficientData`."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        resid = ipw_weight(t, self.propensity) * np.asarray(y, dtype=float)
        if self.obs_gap is not None:
            resid = resid - self.obs_gap(x)
        edges = np.linspace(self.support[0], self.support[1], self.bins + 1)
        which = np.clip(np.searchsorted(edges, x[:, 0], side="right") - 1, 0, self.bins - 1)
        out = []
        for b in range(self.bins):
            rows = which == b
            count = int(rows.sum())
            if count < MIN_BIN_SIZE:
                raise InsufficientData(f"bin {b} has {count} points (< {MIN_BIN_SIZE})")
            r = resid[rows]
            se = float(r.std(ddof=1) / math.sqrt(count))
            out.append((float(r.mean()), se, float(stats.t.ppf(1.0 - self.alpha, count - 1)), count))
        return out

    def __call__(self, x, t, y) -> int:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo_all = _band_values(self.lower, x)
        hi_all = _band_values(self.upper, x)
        edges = np.linspace(self.support[0], self.support[1], self.bins + 1)
        which = np.clip(np.searchsorted(edges, x[:, 0], side="right") - 1, 0, self.bins - 1)
        for b, (mean, se, crit, _) in enumerate(self.statistics(x, t, y)):
            lo = lo_all[which == b].max()
            hi = hi_all[which == b].min()
            if se == 0.0:
                if not lo < mean < hi:
                    return 0
                continue
            if (mean - lo) / se <= crit or (hi - mean) / se <= crit:
                return 0
        return 1


def reference_equivalence_test(alpha: float, bands: tuple[Band, Band], **kwargs) -> EquivalenceTest:
    lower, upper = bands
    return EquivalenceTest(alpha, lower, upper, **kwargs)


@dataclass(frozen=True)
class PowerEstimate:
    """Rejection rates under the base distribution and under the spike mixture."""

    level_hat: float
    power_hat: float
    trials: int
    mc_stderr: float

    @property
    def gap(self) -> float:
        return self.power_hat - self.level_hat


def _rejects(test, x, t, y) -> int:
    try:
        return int(test(x, t, y))
    except InsufficientData:
        return 0


def rejection_rate(test, sampler: Callable[[np.random.Generator], tuple], trials: int, seed) -> float:
    streams = np.random.SeedSequence(seed).spawn(trials)
    hits = sum(_rejects(test, *sampler(np.random.default_rng(s))[:3]) for s in streams)
    return hits / trials


def power_collapse_curve(
    test,
    base: BaseDistribution,
    n_list: Sequence[int],
    trials: int,
    seed: int,
    M: float = 10.0,
    mix_weight: Callable[[int], float] | None = None,
) -> list[tuple[int, PowerEstimate]]:
    """Rejection rates under ``P`` and ``Q_n`` at each sample size.

    ``mc_stderr`` is the Monte-Carlo standard error of ``power_hat -
    level_hat`` (independent trials under each distribution). Tests that
    raise :class:`InsufficientData` count as not rejecting.
    """
    if trials < 200:
        raise ValueError("trials must be >= 200")
    curve = []
    for n in n_list:
        w = None if mix_weight is None else mix_weight(n)
        mixture = build_mixture(base, n, M, mix_weight=w)
        level = rejection_rate(test, lambda rng: base.sample(n, rng), trials, [seed, n, 0])
        power = rejection_rate(test, lambda rng: mixture.sample(n, rng), trials, [seed, n, 1])
        se = math.sqrt((level * (1 - level) + power * (1 - power)) / trials)
        curve.append((n, PowerEstimate(level, power, trials, se)))
    return curve


def curve_to_json(curve) -> str:
    return json.dumps([{"n": n, **asdict(est)} for n, est in curve])
