from __future__ import annotations

import math

import numpy as np
import pytest

from pseudogp import bounds, gp, runner
from pseudogp.exceptions import ConfigError, ExperimentFailed, NotPositiveDefinite
from pseudogp.data import PropensityModel
from pseudogp.kernels import NoiseParams, SEKernel

#: Largest in-distribution MSE tolerated by the sanity runs. The pilot
#: (seeds 0-2, 3 replications each) gave at most 4e-14 for the
#: pseudo-outcome and LCM models, so 1e-3 leaves ample room.
SANITY_MSE = 1e-3


def small_config(**overrides) -> runner.ExperimentConfig:
    raw = {
        "sim": {"design": "synthetic", "d": 1, "n_obs": 100, "n_exp": 60, "n_eval": 50, "n_fill": 16},
        "optimizer": {"method": "lbfgs", "max_iters": 50, "restarts": 1},
        "omega": "oracle",
        "replications": 1,
        "seed": 3,
    }
    raw.update(overrides)
    return runner.ExperimentConfig.from_dict(raw)


def test_single_replication_is_deterministic():
    a = runner.run_experiment(small_config())
    b = runner.run_experiment(small_config())
    assert a.rows == b.rows
    assert len(a.rows) == 6 and a.replications == 1


def test_metric_row_invariants():
    table = runner.run_experiment(small_config(replications=2, omega="ridge"))
    for row in table.rows:
        assert row.width >= 0 and 0 <= row.coverage <= 1 and row.mse >= 0
        lo, hi = row.ci("mse")
        assert lo <= row.mse <= hi


def _sanity_config(poly, models):
    sim = {"design": "synthetic", "d": 1, "n_obs": 100, "n_exp": 200, "noise_sigma0": 0.0,
           "gp_prior": {"output_scale": 0.0, "lengthscale": 1.0}, "n_eval": 200, "n_fill": 16}  # fmt: skip
    if poly is not None:
        sim["poly"] = poly
    return small_config(sim=sim, models=models, replications=2,
                        optimizer={"method": "lbfgs", "max_iters": 200, "restarts": 3})  # fmt: skip


def test_zero_noise_zero_shift_without_nuisance():
    """mu_0 = -x, mu_1 = x: the IPW pseudo-outcome equals the CATE exactly, so every model is exact."""
    table = runner.run_experiment(_sanity_config({"x": -1.0, "t_x": 2.0}, ["ours", "naive", "lcm"]))
    for model in ("ours", "naive", "lcm"):
        assert table.get(model, "in_distribution").mse < SANITY_MSE


def test_zero_noise_zero_shift_structured_models():
    """With a nuisance term in the pseudo-outcome, the task-aware kernels still recover a zero gap."""
    table = runner.run_experiment(_sanity_config(None, ["ours", "lcm"]))
    for model in ("ours", "lcm"):
        assert table.get(model, "in_distribution").mse < SANITY_MSE


def test_failure_threshold(monkeypatch):
    def flaky(cfg, r, covariates=None):
        if r in fail:
            raise NotPositiveDefinite("synthetic failure")
        return {(m, g): (1.0, 0.5, 2.0) for m in cfg.models for g in runner.GRIDS}

    monkeypatch.setattr(runner, "run_replication", flaky)
    fail = {3}
    table = runner.run_experiment(small_config(replications=10))
    assert table.replications == 9 and len(table.failures) == 1
    fail = {3, 7}
    with pytest.raises(ExperimentFailed):
        runner.run_experiment(small_config(replications=10))


def test_standard_errors_shrink_with_replications(monkeypatch):
    """Doubling twice (10 -> 40 replications) halves the SE, within 25%."""

    def fake(cfg, r, covariates=None):
        rng = np.random.default_rng([cfg.seed, r])
        return {(m, g): tuple(rng.normal(1.0, 0.3, 3)) for m in cfg.models for g in runner.GRIDS}

    monkeypatch.setattr(runner, "run_replication", fake)
    se10 = runner.run_experiment(small_config(replications=10, models=["ours"])).get("ours", "in_distribution").mse_se
    se40 = runner.run_experiment(small_config(replications=40, models=["ours"])).get("ours", "in_distribution").mse_se
    assert se40 / se10 == pytest.approx(0.5, rel=0.25)


def test_config_errors():
    with pytest.raises(ConfigError) as info:
        small_config(replications=0)
    assert info.value.key == "replications"
    with pytest.raises(ConfigError) as info:
        small_config(models=["gbm"])
    assert info.value.key == "models"
    with pytest.raises(ConfigError) as info:
        small_config(models=[])
    with pytest.raises(ConfigError) as info:
        small_config(optimizer={"methd": "lbfgs"})
    assert info.value.key == "optimizer.methd"
    with pytest.raises(ConfigError) as info:
        small_config(colour="red")
    assert info.value.key == "colour"


def test_metrics_csv_columns(tmp_path):
    table = runner.run_experiment(small_config(models=["ours"]))
    path = runner.write_metrics(table, tmp_path)
    header = path.read_text().splitlines()[0].split(",")
    assert tuple(header) == runner.METRIC_COLUMNS
    assert len(path.read_text().splitlines()) == 3


def test_prior_band_without_experimental_data(tmp_path):
    """n_e = 0: the band is the prior band, identical at every point."""
    cfg = small_config(bound={"delta": 0.05}, n_exp_list=[0], models=["ours"])
    covered, w_in, w_out = runner.bound_replication(cfg, 0, 0)
    assert w_in == pytest.approx(w_out)
    kernel = gp.default_kernel("ours", PropensityModel.constant(0.5), False)
    state = gp.posterior(gp.GpModel(kernel, NoiseParams(), np.zeros((0, 1)), [], []))
    query = np.linspace(-3, 3, 25)[:, None]
    report = bounds.uniform_band(state, None, bounds.BoundConfig.for_box([-3], [3]), query)
    np.testing.assert_allclose(report.half_width, report.half_width[0])
    assert report.half_width[0] == pytest.approx(math.sqrt(report.beta) * SEKernel().output_scale + report.gamma)
    assert w_in == pytest.approx(2 * report.half_width[0])
    table = runner.run_bound_study(cfg)
    assert runner.write_bound_table(table, tmp_path).exists()
    assert table.get(0).width_in == pytest.approx(w_in)
