"""Command-line entry points.

Every subcommand reads one JSON config, writes its outputs to the
configured directory together with ``manifest.json`` (config hash, seed,
package versions) and exits with 0 on success, 2 on a config error and 3
on a runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy

from . import __version__, gp, hardness, runner
from .bounds import BoundConfig, uniform_band
from .data import (
    CsvSchema,
    Environment,
    ObservationalModel,
    PropensityModel,
    RidgeModel,
    ZeroModel,
    fit_observational_ridge,
    load_csv,
)
from .exceptions import ConfigError, ParseError, PseudoGPError, SchemaError, ValidationError
from .kernels import NoiseParams, kernel_from_dict
from .pseudo_outcome import ipw_transform
from .simulate import SimConfig, generate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("pseudogp")


def read_config(path) -> dict:
    """Parse a JSON config; malformed JSON is reported with its byte offset."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    text = raw.decode("utf-8", errors="replace")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ConfigError(f"malformed JSON at byte {offset}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: Mapping, seed, outputs) -> Path:
    manifest = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": seed,
        "outputs": sorted(str(p) for p in outputs),
        "versions": {
            "pseudogp": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _require(cfg: Mapping, key: str):
    if key not in cfg:
        raise ConfigError(f"missing required setting {key!r}", key)
    return cfg[key]


def _check_keys(cfg: Mapping, allowed: set[str]) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown setting {unknown[0]!r}", unknown[0])


def _out_dir(cfg: Mapping, override: str | None) -> Path:
    out = Path(override or cfg.get("output_dir", "results"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- simulate -----------------------------------------------------------------

def cmd_simulate(cfg: dict, out: Path) -> tuple[list[Path], int]:
    _check_keys(cfg, {"sim", "covariates", "covariate_schema", "output_dir"})
    exp_cfg = runner.ExperimentConfig.from_dict({k: v for k, v in cfg.items() if k != "output_dir"})
    sim = exp_cfg.sim
    obs, exp, truth = generate(sim, exp_cfg.load_covariates())
    paths = [out / "observational.csv", out / "truth.json"]
    obs.to_csv(paths[0])
    if exp is not None:
        paths.append(out / "experimental.csv")
        exp.to_csv(paths[-1])
    paths[1].write_text(json.dumps(truth.sidecar()) + "\n")
    return paths, sim.seed


# -- fit / predict ----------------------------------------------------------------

def _obs_model_from_dict(raw: Mapping) -> ObservationalModel:
    if raw.get("kind") == "ridge":
        slopes = tuple(np.asarray(s, dtype=float) for s in raw["slopes"])
        return RidgeModel(tuple(raw["intercepts"]), slopes, float(raw["lambda"]))
    return ZeroModel()


def _obs_model_to_dict(model: ObservationalModel) -> dict:
    return model.to_dict() if isinstance(model, RidgeModel) else {"kind": "zero"}


def cmd_fit(cfg: dict, out: Path) -> tuple[list[Path], int]:
    _check_keys(
        cfg,
        {"experimental", "observational", "schema", "model", "propensity", "omega", "ridge_lambda",
         "optimizer", "learn_scale", "output_dir"},
    )  # fmt: skip
    schema = CsvSchema.from_dict({**cfg.get("schema", {}), "environment": "experimental"})
    if schema.outcome is None:
        schema = replace(schema, outcome="y")
    exp = load_csv(_require(cfg, "experimental"), schema)
    variant = cfg.get("model", "ours")
    if variant not in runner.MODELS:
        raise ConfigError(f"unknown model {variant!r}", "model")
    try:
        propensity = PropensityModel.constant(float(cfg.get("propensity", 0.5)))
    except ValueError as exc:
        raise ConfigError(str(exc), "propensity") from None
    omega = cfg.get("omega", "ridge" if "observational" in cfg else "zero")
    if omega == "ridge":
        obs_schema = replace(schema, environment=Environment.OBSERVATIONAL)
        obs = load_csv(_require(cfg, "observational"), obs_schema)
        obs_model: ObservationalModel = fit_observational_ridge(obs, float(cfg.get("ridge_lambda", 1e-3)))
    elif omega == "zero":
        obs_model = ZeroModel()
    else:
        raise ConfigError("omega must be 'ridge' or 'zero'", "omega")
    try:
        optimizer = gp.OptimizerConfig.from_dict(cfg.get("optimizer"))
    except KeyError as exc:
        raise ConfigError(f"unknown optimizer setting {exc.args[0]!r}", f"optimizer.{exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "optimizer") from None
    pseudo = ipw_transform(exp, propensity, obs_model)
    model = gp.fit_variant(variant, pseudo, propensity, optimizer, learn_scale=bool(cfg.get("learn_scale", False)))
    saved = {
        **model.to_dict(),
        "propensity": propensity.value,
        "covariate_names": list(exp.covariate_names),
        "x": model.x.tolist(),
        "tasks": model.tasks.tolist(),
        "targets": model.targets.tolist(),
        "jitter": list(model.jitter),
        "obs_model": _obs_model_to_dict(obs_model),
    }
    path = out / "model.json"
    path.write_text(json.dumps(saved) + "\n")
    return [path], optimizer.seed


def load_fitted(path) -> tuple[gp.GpModel, ObservationalModel]:
    raw = read_config(path)
    try:
        propensity = PropensityModel.constant(raw["propensity"])
        kernel = kernel_from_dict(raw["kernel"], propensity)
        noise = NoiseParams.natural(raw["noise"]["sigma0"], raw["noise"]["sigma1"])
        x = np.asarray(raw["x"], dtype=float).reshape(len(raw["tasks"]), -1)
        model = gp.GpModel(kernel, noise, x, raw["tasks"], raw["targets"], tuple(raw["jitter"]))
        return model, _obs_model_from_dict(raw["obs_model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path} is not a fitted model file ({exc})", "model") from None


def _query_points(cfg: Mapping, d: int) -> np.ndarray:
    if "query" in cfg:
        query = np.asarray(cfg["query"], dtype=float)
        return query.reshape(-1, d)
    path = _require(cfg, "query_csv")
    schema = CsvSchema.from_dict(cfg.get("schema", {}))
    return load_csv(path, schema).covariates


def cmd_predict(cfg: dict, out: Path) -> tuple[list[Path], int]:
    _check_keys(cfg, {"model", "query", "query_csv", "schema", "z", "output_dir"})
    model, obs_model = load_fitted(_require(cfg, "model"))
    state = gp.posterior(model)
    query = _query_points(cfg, model.x.shape[1])
    pred = gp.predict(state, obs_model, query, float(cfg.get("z", gp.Z_95)))
    path = out / "predictions.csv"
    header = [f"x{j + 1}" for j in range(query.shape[1])] + ["mean_gap", "std", "mean_cate", "low", "high"]
    cols = np.column_stack([query, pred.mean_gap, pred.std, pred.mean_cate, pred.credible_low, pred.credible_high])
    _write_rows(path, header, cols)
    return [path], None


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# -- bound / experiment / hardness ------------------------------------------------

def _experiment_config(cfg: dict) -> runner.ExperimentConfig:
    return runner.ExperimentConfig.from_dict(cfg)


def cmd_bound(cfg: dict, out: Path) -> tuple[list[Path], int]:
    """Bound study when ``n_exp_list`` or ``sim`` is given; a single band for a fitted model otherwise."""
    if "model" in cfg and isinstance(cfg["model"], str) and "sim" not in cfg:
        return _single_band(cfg, out)
    exp_cfg = _experiment_config(cfg)
    if exp_cfg.bound is None:
        exp_cfg = replace(exp_cfg, bound=BoundConfig())
    table = runner.run_bound_study(exp_cfg, progress=lambda n, r: log.info("n_exp=%d replication %d done", n, r))
    return [runner.write_bound_table(table, out)], exp_cfg.seed


def _single_band(cfg: dict, out: Path) -> tuple[list[Path], int]:
    _check_keys(cfg, {"model", "query", "query_csv", "schema", "bound", "output_dir"})
    model, obs_model = load_fitted(cfg["model"])
    bcfg = BoundConfig.from_dict(_require(cfg, "bound"))
    query = _query_points(cfg, model.x.shape[1])
    report = uniform_band(gp.posterior(model), obs_model, bcfg, query)
    path = out / "band.json"
    path.write_text(report.to_json() + "\n")
    return [path], bcfg.seed


def cmd_experiment(cfg: dict, out: Path) -> tuple[list[Path], int]:
    exp_cfg = _experiment_config(cfg)
    table = runner.run_experiment(exp_cfg, progress=lambda r: log.info("replication %d done", r))
    return [runner.write_metrics(table, out)], exp_cfg.seed


HARDNESS_KEYS = {"alpha", "lower", "upper", "bins", "n_list", "trials", "seed", "M", "noise", "output_dir"}


def cmd_hardness(cfg: dict, out: Path) -> tuple[list[Path], int]:
    _check_keys(cfg, HARDNESS_KEYS)
    alpha = float(cfg.get("alpha", 0.05))
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)", "alpha")
    trials = int(cfg.get("trials", 1000))
    if trials < 200:
        raise ConfigError("trials must be >= 200", "trials")
    base = hardness.BaseDistribution(noise=float(cfg.get("noise", 0.5)))
    test = hardness.reference_equivalence_test(
        alpha, (float(cfg.get("lower", -1.0)), float(cfg.get("upper", 1.0))), bins=int(cfg.get("bins", 4))
    )
    seed = int(cfg.get("seed", 0))
    curve = hardness.power_collapse_curve(
        test, base, [int(n) for n in cfg.get("n_list", [50, 100, 200, 400])], trials, seed, float(cfg.get("M", 5.0))
    )
    path = out / "power_curve.json"
    path.write_text(hardness.curve_to_json(curve) + "\n")
    return [path], seed


COMMANDS: dict[str, Callable[[dict, Path], tuple[list[Path], int]]] = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "bound": cmd_bound,
    "experiment": cmd_experiment,
    "hardness": cmd_hardness,
}

HELP = {
    "simulate": "generate observational/experimental CSVs and a ground-truth sidecar",
    "fit": "fit a GP model to an experimental CSV",
    "predict": "predict CATE with credible intervals from a fitted model",
    "bound": "uniform error bands (single model or replicated study)",
    "experiment": "replicated comparison of the GP models (metrics.csv)",
    "hardness": "power collapse of an equivalence test under spike mixtures",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudogp", description="Pseudo-outcome GP tools for CATE correction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--output-dir", help="override the config's output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = read_config(args.config)
        out = _out_dir(cfg, args.output_dir)
        outputs, seed = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, seed, outputs)
    except ConfigError as exc:
        where = f" (at {exc.key!r})" if exc.key else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, ParseError, ValidationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PseudoGPError, OSError, ArithmeticError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in outputs:
        print(path)
    return EXIT_OK
