"""Dense symmetric positive-definite linear algebra.

Everything the GP code needs from a linear-algebra backend: a jittered
Cholesky factorisation, solves and log-determinants through the factor,
an explicit inverse (for marginal-likelihood gradients), power
iteration for the largest eigenvalue and the smallest eigenvalue of a
factored matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .exceptions import DimensionMismatch, NoConvergence, NotPositiveDefinite

#: Relative jitter levels, multiplied by the mean diagonal of the matrix.
DEFAULT_JITTER: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)

_SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower Cholesky factor of ``m + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _as_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky(m, jitter_schedule: Sequence[float] = DEFAULT_JITTER) -> CholeskyFactor:
    """Factor a symmetric matrix, escalating diagonal jitter until it succeeds.

    Parameters
    ----------
    m : array of shape (n, n)
        Symmetric matrix.
    jitter_schedule : sequence of float
        Ascending relative jitter levels starting at 0. Level ``j`` adds
        ``j * mean(diag(m))`` to the diagonal (``j`` itself if the mean
        diagonal is not positive).

    Returns
    -------
    CholeskyFactor
        Factor for the first level that succeeds; ``jitter_used`` is the
        absolute amount added.
    """
    m = _as_square(m)
    schedule = [float(j) for j in jitter_schedule]
    if not schedule or schedule[0] != 0.0 or any(b < a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("jitter_schedule must be ascending and start at 0")
    scale = float(np.abs(m).max()) if m.size else 1.0
    if m.size and np.abs(m - m.T).max() > _SYMMETRY_RTOL * max(scale, 1.0):
        raise ValueError("matrix is not symmetric")
    if m.shape[0] == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)
    mean_diag = float(np.mean(np.diag(m)))
    unit = mean_diag if mean_diag > 0 else 1.0
    eye = np.eye(m.shape[0])
    for level in schedule:
        jitter = level * unit
        try:
            lower = scipy.linalg.cholesky(m + jitter * eye, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(lower)):
            return CholeskyFactor(lower, jitter)
    raise NotPositiveDefinite(
        f"matrix of size {m.shape[0]} not positive definite for jitter up to {schedule[-1]:g}"
    )


def solve_psd(f: CholeskyFactor, b) -> np.ndarray:
    """Solve ``(L L^T) x = b`` with two triangular solves."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has {f.dim}")
    if f.dim == 0:
        return b.copy()
    return scipy.linalg.cho_solve((f.lower, True), b, check_finite=False)


def solve_lower(f: CholeskyFactor, b) -> np.ndarray:
    """Forward substitution ``L^{-1} b``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has {f.dim}")
    if f.dim == 0:
        return b.copy()
    return scipy.linalg.solve_triangular(f.lower, b, lower=True, check_finite=False)


def log_det(f: CholeskyFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def inverse(f: CholeskyFactor) -> np.ndarray:
    """Explicit symmetric inverse of ``L L^T`` (LAPACK ``potri``)."""
    if f.dim == 0:
        return np.zeros((0, 0))
    inv, info = lapack.dpotri(f.lower, lower=1)
    if info != 0:
        raise NotPositiveDefinite(f"potri failed with info={info}")
    return np.tril(inv) + np.tril(inv, -1).T


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as a mat-vec.

    Stops when the Rayleigh quotient changes by at most ``tol`` (relative)
    or when the residual ``|A v - lambda v|`` drops below ``sqrt(tol) *
    lambda``. The second rule handles clusters of nearly equal top
    eigenvalues, where the iterate keeps rotating inside the cluster
    while the quotient is already accurate to the cluster's width.
    """
    if dim == 0:
        return 0.0
    # all-ones start with a small deterministic tilt so it is never exactly
    # orthogonal to the leading eigenvector
    v = np.ones(dim) + 1e-3 * np.sin(np.arange(1, dim + 1))
    v /= np.linalg.norm(v)
    estimate = 0.0
    resid_tol = math.sqrt(tol)
    for _ in range(max_iter):
        w = matvec(v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        resid = float(np.linalg.norm(w - new * v))
        v = w / norm
        if abs(new - estimate) <= tol * abs(new) or resid <= resid_tol * abs(new):
            return new
        estimate = new
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


def spectral_norm(m, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    m = _as_square(m)
    return power_iteration(lambda v: m @ v, m.shape[0], tol, max_iter)


def inverse_spectral_norm(f: CholeskyFactor) -> float:
    """``||(L L^T)^{-1}||_2``, the reciprocal of the smallest eigenvalue of ``L L^T``.

    Uses LAPACK's relatively robust representation solver restricted to the
    lowest eigenvalue. Inverse power iteration is not used here: GP
    covariances with a noise floor have many eigenvalues just above the
    noise variance, and the iteration then stalls (ratios of 0.9997 between
    the leading inverse eigenvalues are typical).
    """
    if f.dim == 0:
        return 0.0
    smallest = scipy.linalg.eigh(
        f.reconstruct(), eigvals_only=True, subset_by_index=[0, 0], driver="evr", check_finite=False
    )[0]
    if smallest <= 0.0:
        raise NotPositiveDefinite(f"smallest eigenvalue {smallest:.3e} is not positive")
    return float(1.0 / smallest)
