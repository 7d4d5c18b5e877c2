from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudogp import numerics
from pseudogp.exceptions import DimensionMismatch, NotPositiveDefinite

A = np.array([[4.0, 2.0], [2.0, 3.0]])


def random_spd(rng, n):
    m = rng.standard_normal((n, n))
    return m @ m.T + n * np.eye(n)


def test_cholesky_identity():
    f = numerics.cholesky(np.eye(3), [0.0])
    assert np.array_equal(f.lower, np.eye(3))
    assert f.jitter_used == 0.0


def test_cholesky_hand_example():
    f = numerics.cholesky(A, [0.0])
    np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], atol=1e-14)


def test_cholesky_singular_needs_jitter():
    f = numerics.cholesky(np.ones((2, 2)), [0.0, 1e-6])
    assert f.jitter_used == pytest.approx(1e-6)
    np.testing.assert_allclose(f.reconstruct(), np.ones((2, 2)) + 1e-6 * np.eye(2), atol=1e-12)


def test_cholesky_fails_without_enough_jitter():
    with pytest.raises(NotPositiveDefinite):
        numerics.cholesky(-np.eye(2), [0.0, 1e-6])


def test_cholesky_rejects_bad_schedule_and_asymmetry():
    with pytest.raises(ValueError):
        numerics.cholesky(np.eye(2), [1e-6])
    with pytest.raises(ValueError):
        numerics.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]), [0.0])
    with pytest.raises(DimensionMismatch):
        numerics.cholesky(np.ones((2, 3)), [0.0])


def test_solve_examples():
    eye = numerics.cholesky(np.eye(2), [0.0])
    np.testing.assert_allclose(numerics.solve_psd(eye, [1.0, 2.0]), [1.0, 2.0])
    np.testing.assert_allclose(numerics.solve_psd(numerics.cholesky(A, [0.0]), [1.0, 0.0]), [0.375, -0.25])
    diag = numerics.cholesky(np.diag([2.0, 2.0]), [0.0])
    np.testing.assert_allclose(numerics.solve_psd(diag, [2.0, 4.0]), [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        numerics.solve_psd(diag, [1.0, 2.0, 3.0])


def test_log_det_examples():
    assert numerics.log_det(numerics.cholesky(np.eye(4), [0.0])) == 0.0
    assert numerics.log_det(numerics.cholesky(np.diag([math.e, math.e]), [0.0])) == pytest.approx(2.0)
    assert numerics.log_det(numerics.cholesky(A, [0.0])) == pytest.approx(math.log(np.linalg.det(A)))
    assert numerics.log_det(numerics.cholesky(A, [0.0])) == pytest.approx(math.log(8.0))


def test_spectral_norm_examples():
    assert numerics.spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-9)
    assert numerics.spectral_norm(np.eye(5)) == pytest.approx(1.0)
    assert numerics.spectral_norm(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(3.0, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_factor_and_solve_properties(n, seed):
    rng = np.random.default_rng(seed)
    m = random_spd(rng, n)
    f = numerics.cholesky(m)
    np.testing.assert_allclose(f.reconstruct(), m, rtol=1e-10, atol=1e-10)
    b = rng.standard_normal(n)
    np.testing.assert_allclose(numerics.solve_psd(f, b), np.linalg.solve(m, b), rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(numerics.solve_lower(f, b), np.linalg.solve(f.lower, b), rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(numerics.inverse(f), np.linalg.inv(m), rtol=1e-8, atol=1e-10)
    assert numerics.log_det(f) == pytest.approx(np.linalg.slogdet(m)[1], rel=1e-10, abs=1e-10)
    eig = np.linalg.eigvalsh(m)
    assert numerics.spectral_norm(m, tol=1e-13) == pytest.approx(eig[-1], rel=1e-6)
    assert numerics.inverse_spectral_norm(f) == pytest.approx(1.0 / eig[0], rel=1e-9)


def test_empty_operator():
    f = numerics.cholesky(np.zeros((0, 0)))
    assert f.dim == 0
    assert numerics.inverse_spectral_norm(f) == 0.0


def test_inverse_norm_with_clustered_spectrum():
    """Many eigenvalues just above a noise floor, as in a GP covariance."""
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (400, 2))
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    m = np.exp(-0.5 * d2 / 0.6**2) + 0.25 * np.eye(400)
    f = numerics.cholesky(m)
    assert numerics.inverse_spectral_norm(f) == pytest.approx(1.0 / np.linalg.eigvalsh(m)[0], rel=1e-9)
