"""Squared-exponential base kernels and the three multitask kernels.

Points carry a task label: 0 and 1 are the pseudo-outcome regressions of
the control and treated arms, 2 is the (noiseless) CATE-gap task that is
only ever predicted. Every multitask kernel here is a sum of components

    K((x, t), (x', t')) = sum_c  u_c(x, t)^T A_c u_c(x', t')  k_c(x, x')

with a base SE kernel ``k_c``, a coregionalisation matrix ``A_c`` and a
per-point mixing vector ``u_c``. Hyperparameters are stored in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import ClassVar, NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .data import PropensityModel
from .exceptions import DimensionMismatch, InvalidTask
from .pseudo_outcome import ipw_weight

CONTROL, TREATED, CATE = 0, 1, 2
_TASKS = (CONTROL, TREATED, CATE)


def sqdist(x1, x2) -> np.ndarray:
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    if x1.shape[1] != x2.shape[1]:
        raise DimensionMismatch(f"points have dimension {x1.shape[1]} and {x2.shape[1]}")
    return cdist(x1, x2, "sqeuclidean")


@dataclass(frozen=True)
class SEKernel:
    """``s^2 exp(-|x - x'|^2 / (2 l^2))`` with ``s`` and ``l`` stored as logs."""

    log_output_scale: float = 0.0
    log_lengthscale: float = 0.0

    @classmethod
    def natural(cls, output_scale: float = 1.0, lengthscale: float = 1.0) -> "SEKernel":
        with np.errstate(divide="ignore"):
            return cls(float(np.log(output_scale)), float(np.log(lengthscale)))

    @property
    def output_scale(self) -> float:
        return math.exp(self.log_output_scale)

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def variance(self) -> float:
        return math.exp(2.0 * self.log_output_scale)

    def from_sqdist(self, d2: np.ndarray) -> np.ndarray:
        return self.variance * np.exp(-0.5 * d2 / self.lengthscale**2)

    def __call__(self, x1, x2=None) -> np.ndarray:
        return self.from_sqdist(sqdist(x1, x1 if x2 is None else x2))

    def lipschitz(self) -> float:
        """Lipschitz constant in either argument: ``s^2 e^{-1/2} / l``."""
        return self.variance * math.exp(-0.5) / self.lengthscale

    def to_dict(self) -> dict:
        return {"output_scale": self.output_scale, "lengthscale": self.lengthscale}

    @classmethod
    def from_dict(cls, raw: dict) -> "SEKernel":
        return cls.natural(float(raw.get("output_scale", 1.0)), float(raw.get("lengthscale", 1.0)))


def kernel_eval(k: SEKernel, x, x2) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise DimensionMismatch(f"points have dimension {x.size} and {x2.size}")
    return float(k.variance * np.exp(-0.5 * np.sum((x - x2) ** 2) / k.lengthscale**2))


def kernel_lipschitz(k: SEKernel) -> float:
    return k.lipschitz()


@dataclass(frozen=True)
class NoiseParams:
    """Per-arm observation noise standard deviations (log scale)."""

    log_sigma0: float = 0.0
    log_sigma1: float = 0.0

    @classmethod
    def natural(cls, sigma0: float, sigma1: float | None = None) -> "NoiseParams":
        sigma1 = sigma0 if sigma1 is None else sigma1
        return cls(math.log(sigma0), math.log(sigma1))

    @property
    def sigma0(self) -> float:
        return math.exp(self.log_sigma0)

    @property
    def sigma1(self) -> float:
        return math.exp(self.log_sigma1)

    def variances(self, tasks) -> np.ndarray:
        """Noise variance per point; CATE-task points are noiseless."""
        tasks = _check_tasks(tasks)
        out = np.zeros(tasks.shape[0])
        out[tasks == CONTROL] = self.sigma0**2
        out[tasks == TREATED] = self.sigma1**2
        return out


def _check_tasks(tasks) -> np.ndarray:
    tasks = np.atleast_1d(np.asarray(tasks)).astype(np.int64)
    bad = ~np.isin(tasks, _TASKS)
    if bad.any():
        raise InvalidTask(f"task {tasks[bad][0]} is not one of {_TASKS}")
    return tasks


class Component(NamedTuple):
    """One ``u^T A u' k`` term of a multitask kernel.

    ``coreg_grads`` holds dA/dp for each free coregionalisation parameter;
    ``free_scale`` / ``free_lengthscale`` say whether the base kernel's
    parameters are optimised.
    """

    kernel: SEKernel
    coreg: np.ndarray
    coreg_grads: tuple[np.ndarray, ...]
    free_scale: bool
    free_lengthscale: bool


class MultitaskKernel:
    """Common assembly for the naive, pseudo-outcome and LCM kernels."""

    variant: ClassVar[str] = "abstract"

    # subclasses provide these
    def components(self) -> list[Component]:
        raise NotImplementedError

    def mixing(self, x: np.ndarray, tasks: np.ndarray) -> list[np.ndarray]:
        """Per-component mixing matrices, each of shape (n, rank)."""
        raise NotImplementedError

    @property
    def param_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def get_params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, theta) -> "MultitaskKernel":
        raise NotImplementedError

    @property
    def cate_kernel(self) -> SEKernel:
        """Base kernel of the CATE-gap component (used by the uniform bounds)."""
        raise NotImplementedError

    def __call__(self, x1, t1, x2, t2, d2: np.ndarray | None = None) -> np.ndarray:
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        t1, t2 = _check_tasks(t1), _check_tasks(t2)
        if d2 is None:
            d2 = sqdist(x1, x2)
        out = np.zeros((x1.shape[0], x2.shape[0]))
        for comp, u1, u2 in zip(self.components(), self.mixing(x1, t1), self.mixing(x2, t2)):
            out += ((u1 @ comp.coreg) @ u2.T) * comp.kernel.from_sqdist(d2)
        return out

    def diag(self, x, tasks) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tasks = _check_tasks(tasks)
        out = np.zeros(x.shape[0])
        for comp, u in zip(self.components(), self.mixing(x, tasks)):
            out += np.einsum("ij,jk,ik->i", u, comp.coreg, u) * comp.kernel.variance
        return out

    def gram_with_grads(self, x, tasks, d2: np.ndarray | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
        """Training Gram matrix and its derivatives w.r.t. :meth:`get_params`."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tasks = _check_tasks(tasks)
        if d2 is None:
            d2 = sqdist(x, x)
        gram = np.zeros((x.shape[0], x.shape[0]))
        grads: list[np.ndarray] = []
        for comp, u in zip(self.components(), self.mixing(x, tasks)):
            base = comp.kernel.from_sqdist(d2)
            weighted = ((u @ comp.coreg) @ u.T) * base
            gram += weighted
            if comp.free_scale:
                grads.append(2.0 * weighted)
            if comp.free_lengthscale:
                grads.append(weighted * (d2 / comp.kernel.lengthscale**2))
            for da in comp.coreg_grads:
                grads.append(((u @ da) @ u.T) * base)
        return gram, grads

    def to_dict(self) -> dict:
        raise NotImplementedError


def _base_names(prefix: str, learn_scale: bool) -> tuple[str, ...]:
    scale = (f"{prefix}.log_output_scale",) if learn_scale else ()
    return scale + (f"{prefix}.log_lengthscale",)


def _base_params(k: SEKernel, learn_scale: bool) -> list[float]:
    return ([k.log_output_scale] if learn_scale else []) + [k.log_lengthscale]


def _take_base(k: SEKernel, learn_scale: bool, theta: list[float]) -> SEKernel:
    """Consume this kernel's entries from the front of ``theta``."""
    scale = theta.pop(0) if learn_scale else k.log_output_scale
    return SEKernel(scale, theta.pop(0))


@dataclass(frozen=True)
class NaiveKernel(MultitaskKernel):
    """One GP shared by both arms; every task sees the same function.

    With ``learn_scale=False`` the output scale stays at its initial value
    and only the lengthscale is optimised.
    """

    k: SEKernel = field(default_factory=SEKernel)
    learn_scale: bool = True

    variant: ClassVar[str] = "naive"

    def components(self):
        return [Component(self.k, np.ones((1, 1)), (), self.learn_scale, True)]

    def mixing(self, x, tasks):
        return [np.ones((len(tasks), 1))]

    @property
    def param_names(self):
        return _base_names("k", self.learn_scale)

    def get_params(self):
        return np.array(_base_params(self.k, self.learn_scale))

    def with_params(self, theta):
        theta = [float(v) for v in theta]
        return replace(self, k=_take_base(self.k, self.learn_scale, theta))

    @property
    def cate_kernel(self):
        return self.k

    def to_dict(self):
        return {"variant": self.variant, "k": self.k.to_dict(), "learn_scale": [self.learn_scale]}


@dataclass(frozen=True, eq=False)
class PseudoOutcomeKernel(MultitaskKernel):
    """Fixed mixing ``a a^T k + b(x) b(x)^T l`` of the pseudo-outcome model.

    ``a = (1, 1, 1)`` and ``b(x) = (-1/(1-pi(x)), 1/pi(x), 0)``, so the CATE
    task sees only ``k`` and each arm task additionally sees the nuisance
    ``phi`` scaled by its inverse-propensity weight.
    """

    k: SEKernel = field(default_factory=SEKernel)
    l: SEKernel = field(default_factory=SEKernel)
    propensity: PropensityModel = field(default_factory=lambda: PropensityModel.constant(0.5))
    learn_scale: tuple[bool, bool] = (True, True)

    variant: ClassVar[str] = "pseudo"

    def components(self):
        one = np.ones((1, 1))
        return [
            Component(self.k, one, (), self.learn_scale[0], True),
            Component(self.l, one, (), self.learn_scale[1], True),
        ]

    def nuisance_weights(self, x, tasks) -> np.ndarray:
        b = np.zeros(len(tasks))
        arm = tasks != CATE
        if arm.any():
            b[arm] = ipw_weight(tasks[arm], self.propensity(x[arm]))
        return b

    def mixing(self, x, tasks):
        return [np.ones((len(tasks), 1)), self.nuisance_weights(x, tasks)[:, None]]

    @property
    def param_names(self):
        return _base_names("k", self.learn_scale[0]) + _base_names("l", self.learn_scale[1])

    def get_params(self):
        return np.array(_base_params(self.k, self.learn_scale[0]) + _base_params(self.l, self.learn_scale[1]))

    def with_params(self, theta):
        theta = [float(v) for v in theta]
        k = _take_base(self.k, self.learn_scale[0], theta)
        return replace(self, k=k, l=_take_base(self.l, self.learn_scale[1], theta))

    @property
    def cate_kernel(self):
        return self.k

    def to_dict(self):
        return {
            "variant": self.variant,
            "k": self.k.to_dict(),
            "l": self.l.to_dict(),
            "learn_scale": list(self.learn_scale),
        }


def _chol2(p) -> np.ndarray:
    """2x2 lower factor from ``(log L00, L10, log L11)``."""
    return np.array([[math.exp(p[0]), 0.0], [p[1], math.exp(p[2])]])


def _chol2_params(a) -> np.ndarray:
    """Inverse of :func:`_chol2` for a PSD 2x2 matrix (rank-1 allowed)."""
    a = np.asarray(a, dtype=float)
    l00 = math.sqrt(max(a[0, 0], 0.0))
    l10 = a[1, 0] / l00 if l00 > 0 else 0.0
    l11 = math.sqrt(max(a[1, 1] - l10**2, 0.0))
    with np.errstate(divide="ignore"):
        return np.array([np.log(l00), l10, np.log(l11)])


def _chol2_grads(p) -> tuple[np.ndarray, ...]:
    lower = _chol2(p)
    d_lower = (
        np.array([[math.exp(p[0]), 0.0], [0.0, 0.0]]),
        np.array([[0.0, 0.0], [1.0, 0.0]]),
        np.array([[0.0, 0.0], [0.0, math.exp(p[2])]]),
    )
    return tuple(dl @ lower.T + lower @ dl.T for dl in d_lower)


@dataclass(frozen=True, eq=False)
class LCMKernel(MultitaskKernel):
    """Trainable linear model of coregionalisation over the two arm tasks.

    ``A0`` and ``A1`` are 2x2 PSD matrices parameterised by the log-Cholesky
    vectors ``coreg0`` and ``coreg1``. Base output scales are fixed (their
    scale is carried by the ``A`` matrices). The CATE task is the
    propensity-weighted combination ``(1 - pi) f_0 + pi f_1`` of the arm
    functions.
    """

    k: SEKernel = field(default_factory=SEKernel)
    l: SEKernel = field(default_factory=SEKernel)
    coreg0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    coreg1: tuple[float, float, float] = (0.0, 0.0, 0.0)
    propensity: PropensityModel = field(default_factory=lambda: PropensityModel.constant(0.5))

    variant: ClassVar[str] = "lcm"

    @classmethod
    def from_matrices(cls, a0, a1, k=None, l=None, propensity=None) -> "LCMKernel":
        return cls(
            k or SEKernel(),
            l or SEKernel(),
            tuple(_chol2_params(a0)),
            tuple(_chol2_params(a1)),
            propensity or PropensityModel.constant(0.5),
        )

    @property
    def A0(self) -> np.ndarray:
        lower = _chol2(self.coreg0)
        return lower @ lower.T

    @property
    def A1(self) -> np.ndarray:
        lower = _chol2(self.coreg1)
        return lower @ lower.T

    def components(self):
        return [
            Component(self.k, self.A0, _chol2_grads(self.coreg0), False, True),
            Component(self.l, self.A1, _chol2_grads(self.coreg1), False, True),
        ]

    def task_vectors(self, x, tasks) -> np.ndarray:
        e = np.zeros((len(tasks), 2))
        e[tasks == CONTROL, 0] = 1.0
        e[tasks == TREATED, 1] = 1.0
        cate = tasks == CATE
        if cate.any():
            pi = self.propensity(x[cate])
            e[cate, 0] = 1.0 - pi
            e[cate, 1] = pi
        return e

    def mixing(self, x, tasks):
        e = self.task_vectors(x, tasks)
        return [e, e]

    @property
    def param_names(self):
        return (
            "k.log_lengthscale", "A0.log_l00", "A0.l10", "A0.log_l11",
            "l.log_lengthscale", "A1.log_l00", "A1.l10", "A1.log_l11",
        )  # fmt: skip

    def get_params(self):
        return np.array([self.k.log_lengthscale, *self.coreg0, self.l.log_lengthscale, *self.coreg1])

    def with_params(self, theta):
        theta = [float(v) for v in theta]
        return replace(
            self,
            k=SEKernel(self.k.log_output_scale, theta[0]),
            coreg0=tuple(theta[1:4]),
            l=SEKernel(self.l.log_output_scale, theta[4]),
            coreg1=tuple(theta[5:8]),
        )

    @property
    def cate_kernel(self):
        return self.k

    def to_dict(self):
        return {
            "variant": self.variant,
            "k": self.k.to_dict(),
            "l": self.l.to_dict(),
            "A0": self.A0.tolist(),
            "A1": self.A1.tolist(),
        }


def task_kernel_eval(kernel: MultitaskKernel, point, other) -> float:
    """Covariance between two (x, task) pairs."""
    (x, t), (x2, t2) = point, other
    return float(kernel(np.atleast_2d(x), [t], np.atleast_2d(x2), [t2])[0, 0])


def gram_matrix(kernel: MultitaskKernel, x, tasks, noise: NoiseParams | None = None) -> np.ndarray:
    """Gram matrix over (x, task) points, plus arm noise on the diagonal."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tasks = _check_tasks(tasks)
    if x.shape[0] == 0:
        raise ValueError("gram_matrix needs at least one point")
    gram = kernel(x, tasks, x, tasks)
    if noise is not None:
        gram[np.diag_indices_from(gram)] += noise.variances(tasks)
    return gram


def kernel_from_dict(raw: dict, propensity: PropensityModel | None = None) -> MultitaskKernel:
    """Rebuild a kernel from :meth:`MultitaskKernel.to_dict` output."""
    variant = raw.get("variant")
    propensity = propensity or PropensityModel.constant(0.5)
    learn = [bool(v) for v in raw.get("learn_scale", (True, True))]
    if variant == "naive":
        return NaiveKernel(SEKernel.from_dict(raw["k"]), learn[0])
    if variant == "pseudo":
        return PseudoOutcomeKernel(
            SEKernel.from_dict(raw["k"]), SEKernel.from_dict(raw["l"]), propensity, (learn[0], learn[1])
        )
    if variant == "lcm":
        return LCMKernel.from_matrices(
            raw["A0"], raw["A1"], SEKernel.from_dict(raw["k"]), SEKernel.from_dict(raw["l"]), propensity
        )
    raise ValueError(f"unknown kernel variant {variant!r}")
