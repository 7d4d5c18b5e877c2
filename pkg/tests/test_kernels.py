from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pseudogp.data import PropensityModel
from pseudogp.exceptions import DimensionMismatch, InvalidTask
from pseudogp.kernels import (
    LCMKernel,
    NaiveKernel,
    NoiseParams,
    PseudoOutcomeKernel,
    SEKernel,
    gram_matrix,
    kernel_eval,
    kernel_from_dict,
    kernel_lipschitz,
    task_kernel_eval,
)


def test_se_kernel_examples():
    k = SEKernel.natural(1.5, 0.7)
    assert kernel_eval(k, [0.3, 0.1], [0.3, 0.1]) == pytest.approx(1.5**2)
    assert kernel_eval(k, [0.0], [1e3]) == 0.0
    unit = SEKernel()
    assert kernel_eval(unit, [0.0], [1.0]) == pytest.approx(math.exp(-0.5))
    series = sum((-0.5) ** j / math.factorial(j) for j in range(30))
    assert kernel_eval(unit, [0.0, 0.0], [0.6, 0.8]) == pytest.approx(series, abs=1e-15)
    with pytest.raises(DimensionMismatch):
        kernel_eval(unit, [0.0], [0.0, 1.0])


def test_kernel_lipschitz_examples():
    assert kernel_lipschitz(SEKernel()) == pytest.approx(math.exp(-0.5))
    # grid search over difference quotients of r -> k(0, r) for s=1, l=1
    r = np.linspace(0, 5, 200_001)
    slope = np.abs(np.diff(np.exp(-0.5 * r**2)) / np.diff(r)).max()
    assert slope == pytest.approx(math.exp(-0.5), abs=1e-3)
    assert kernel_lipschitz(SEKernel.natural(1e-8, 1.0)) < 1e-15
    k = SEKernel.natural(2.0, 0.8)
    assert kernel_lipschitz(SEKernel.natural(2.0, 1.6)) == pytest.approx(kernel_lipschitz(k) / 2)


def test_pseudo_kernel_examples():
    k, l = SEKernel.natural(1.3, 0.9), SEKernel.natural(0.7, 1.4)
    kern = PseudoOutcomeKernel(k, l, PropensityModel.constant(0.5))
    x, x2 = np.array([0.2, -0.4]), np.array([1.0, 0.3])
    assert task_kernel_eval(kern, (x, 2), (x2, 2)) == kernel_eval(k, x, x2)
    expected = kernel_eval(k, x, x) - 4.0 * kernel_eval(l, x, x)
    assert task_kernel_eval(kern, (x, 0), (x, 1)) == pytest.approx(expected)
    naive = NaiveKernel(k)
    for t, t2 in [(0, 1), (1, 2), (0, 0)]:
        assert task_kernel_eval(naive, (x, t), (x2, t2)) == pytest.approx(kernel_eval(k, x, x2))


def test_gram_examples():
    k, l = SEKernel.natural(1.1, 0.5), SEKernel.natural(0.6, 2.0)
    pi = 0.3
    kern = PseudoOutcomeKernel(k, l, PropensityModel.constant(pi))
    x = np.array([[0.4, 0.1]])
    np.testing.assert_allclose(gram_matrix(kern, x, [2]), [[k.variance]])
    noise = NoiseParams.natural(0.8, 0.4)
    gram = gram_matrix(kern, np.vstack([x, x]), [1, 1], noise)
    v = k.variance + (1 / pi) ** 2 * l.variance
    np.testing.assert_allclose(gram, [[v + 0.16, v], [v, v + 0.16]])
    with pytest.raises(InvalidTask):
        gram_matrix(kern, x, [3])


def _random_kernel(variant, rng, pi):
    k = SEKernel(*rng.uniform(-1, 1, 2))
    l = SEKernel(*rng.uniform(-1, 1, 2))
    prop = PropensityModel.constant(pi)
    if variant == "naive":
        return NaiveKernel(k), {"k": (k.output_scale, k.lengthscale)}
    if variant == "pseudo":
        return PseudoOutcomeKernel(k, l, prop), {
            "k": (k.output_scale, k.lengthscale),
            "l": (l.output_scale, l.lengthscale),
        }
    lcm = LCMKernel(SEKernel(0.0, k.log_lengthscale), SEKernel(0.0, l.log_lengthscale),
                    tuple(rng.normal(size=3)), tuple(rng.normal(size=3)), prop)  # fmt: skip
    return lcm, {"k": (1.0, lcm.k.lengthscale), "l": (1.0, lcm.l.lengthscale), "A0": lcm.A0, "A1": lcm.A1}


@pytest.mark.parametrize("variant", ["naive", "pseudo", "lcm"])
def test_kernels_match_written_out_covariance(variant):
    rng = np.random.default_rng(7)
    for _ in range(20):
        pi = float(rng.uniform(0.1, 0.9))
        kern, params = _random_kernel(variant, rng, pi)
        x1, x2 = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        t1, t2 = rng.integers(0, 3, 6), rng.integers(0, 3, 5)
        got = kern(x1, t1, x2, t2)
        want = oracles.joint_covariance(variant, params, x1, t1, x2, t2, pi)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(kern.diag(x1, t1), np.diag(kern(x1, t1, x1, t1)), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["naive", "pseudo", "lcm"]), st.integers(0, 100_000))
def test_gram_is_psd(variant, seed):
    rng = np.random.default_rng(seed)
    kern, _ = _random_kernel(variant, rng, float(rng.uniform(0.05, 0.95)))
    x = rng.normal(size=(15, 2))
    gram = gram_matrix(kern, x, rng.integers(0, 3, 15))
    np.testing.assert_allclose(gram, gram.T, atol=1e-12)
    assert np.linalg.eigvalsh(gram).min() >= -1e-9 * max(1.0, np.abs(gram).max())


@pytest.mark.parametrize("variant", ["naive", "pseudo", "lcm"])
def test_gram_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(11)
    kern, _ = _random_kernel(variant, rng, 0.4)
    x = rng.normal(size=(7, 2))
    tasks = rng.integers(0, 2, 7)
    _, grads = kern.gram_with_grads(x, tasks)
    theta = kern.get_params()
    assert len(grads) == theta.size == len(kern.param_names)
    h = 1e-6
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        fd = (kern.with_params(up)(x, tasks, x, tasks) - kern.with_params(down)(x, tasks, x, tasks)) / (2 * h)
        np.testing.assert_allclose(grads[i], fd, rtol=1e-6, atol=1e-8)


def test_fixed_scale_parameters():
    kern = PseudoOutcomeKernel(learn_scale=(False, False))
    assert kern.param_names == ("k.log_lengthscale", "l.log_lengthscale")
    moved = kern.with_params([0.5, -0.5])
    assert moved.k.output_scale == 1.0 and moved.k.lengthscale == pytest.approx(math.exp(0.5))
    assert NaiveKernel(learn_scale=False).param_names == ("k.log_lengthscale",)


@pytest.mark.parametrize(
    "kern",
    [
        NaiveKernel(SEKernel(0.2, -0.3), False),
        PseudoOutcomeKernel(SEKernel(0.1, 0.4), SEKernel(-0.2, 0.3), PropensityModel.constant(0.3), (True, False)),
        LCMKernel.from_matrices([[2.0, 0.5], [0.5, 1.0]], [[1.0, -0.3], [-0.3, 0.5]], SEKernel(0, 0.3)),
    ],
)
def test_kernel_dict_round_trip(kern):
    prop = getattr(kern, "propensity", None)
    back = kernel_from_dict(kern.to_dict(), prop)
    assert back.param_names == kern.param_names
    np.testing.assert_allclose(back.get_params(), kern.get_params(), atol=1e-12)


def test_lcm_cate_task_is_propensity_weighted():
    pi = 0.3
    a0 = np.array([[1.0, 0.2], [0.2, 2.0]])
    lcm = LCMKernel.from_matrices(a0, np.zeros((2, 2)) + 1e-300, propensity=PropensityModel.constant(pi))
    x = np.zeros((1, 1))
    w = np.array([1 - pi, pi])
    assert task_kernel_eval(lcm, (x, 2), (x, 2)) == pytest.approx(w @ a0 @ w, rel=1e-12)
    assert task_kernel_eval(lcm, (x, 0), (x, 2)) == pytest.approx((a0 @ w)[0], rel=1e-12)
