"""Experiment files: parsing, sweep points and row assembly for the CLI.

An experiment file is JSON::

    {"schema_version": "1",
     "experiments": [{"name": ..., "prior": {"name": "bernoulli_gaussian", "rho": 0.1},
                      "scale": {"name": "constant", "s": 1}, "estimator": {"family": "lasso"},
                      "beta": 1, "snr0_db": 10, "sweep": {"parameter": "beta", "values": [...]},
                      "montecarlo": {"n": 200, "n_trials": 1000}, "outputs": [...]}]}

Field errors are raised as :class:`ConfigError` carrying a dotted path such as
``experiments[1].prior.rho``; JSON syntax errors carry line and column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Optional

import numpy as np

from . import metrics, montecarlo, priors, scalar, solver
from .solver import ProblemConfig, QuadratureSpec

SCHEMA_VERSION = "1"
SWEEP_PARAMETERS = ("beta", "gamma", "snr0_db")
METRICS = ("predict", "simulate", "trials", "cdf")

PREDICT_COLUMNS = (
    "sigma_eff_sq", "gamma_p", "gamma", "mse", "se_db", "signal_se_db", "eta",
    "p_misdetect", "n_solutions", "residual", "iterations", "status",
)  # fmt: skip
SIMULATE_COLUMNS = (
    "median_se_db", "ci_low", "ci_high", "mean_se_db", "q10_se_db", "q90_se_db", "mean_misdetect",
    "non_converged", "n_zero_signal", "n_trials", "m", "realized_ratio", "gamma", "status",
)  # fmt: skip
TRIAL_COLUMNS = ("trial_index", "seed", "se_db", "misdetect", "status", "zero_signal")
CDF_COLUMNS = ("se_db_grid", "cdf")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MonteCarloSpec:
    n: int
    n_trials: int
    master_seed: int = 0
    lasso_tol: float = 1e-8
    lasso_max_iter: int = 100_000


@dataclass(frozen=True)
class Experiment:
    name: str
    prior: priors.Prior
    scale: priors.ScaleDist
    family: str
    gamma: Any  # float, None (optimise) or "lmmse"
    beta: Optional[float]
    sigma0_sq: Optional[float]
    snr0_db: Optional[float]
    sweep_parameter: str
    sweep_values: tuple
    scale_known: bool = True
    support: bool = False
    montecarlo: Optional[MonteCarloSpec] = None
    outputs: dict = field(default_factory=dict)
    quad: QuadratureSpec = QuadratureSpec()


# ---------------------------------------------------------------- parsing


def _get(d: dict, key: str, path: str, kind=None, default=...):
    if key not in d:
        if default is ...:
            raise ConfigError(f"{path}.{key}: missing required field")
        return default
    v = d[key]
    if kind is not None and v is not None:
        ok = isinstance(v, kind) and not (kind in ((int, float), int) and isinstance(v, bool))
        if not ok:
            names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise ConfigError(f"{path}.{key}: expected {names}, got {type(v).__name__}")
    return v


def _check_keys(d: dict, allowed: set, path: str):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(extra)}")


def parse_prior(d: dict, path: str) -> priors.Prior:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    name = _get(d, "name", path, str)
    num = (int, float)
    try:
        if name == "bernoulli_gaussian":
            _check_keys(d, {"name", "rho", "var"}, path)
            return priors.bernoulli_gaussian(_get(d, "rho", path, num), _get(d, "var", path, num, 1.0))
        if name == "three_point":
            _check_keys(d, {"name", "rho"}, path)
            return priors.three_point(_get(d, "rho", path, num))
        if name == "gaussian":
            _check_keys(d, {"name", "var", "mean"}, path)
            return priors.gaussian(_get(d, "var", path, num), _get(d, "mean", path, num, 0.0))
        if name == "discrete":
            _check_keys(d, {"name", "atoms", "weights"}, path)
            return priors.discrete(_get(d, "atoms", path, list), _get(d, "weights", path, list))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.name: unknown prior {name!r}")


def parse_scale(d: dict, path: str) -> priors.ScaleDist:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    name = _get(d, "name", path, str)
    num = (int, float)
    try:
        if name == "constant":
            _check_keys(d, {"name", "s"}, path)
            return priors.constant_scale(_get(d, "s", path, num, 1.0))
        if name == "uniform_db":
            _check_keys(d, {"name", "range_db", "n_atoms"}, path)
            return priors.uniform_db(_get(d, "range_db", path, num, 10.0), _get(d, "n_atoms", path, int, 32))
        if name == "discrete":
            _check_keys(d, {"name", "atoms", "weights"}, path)
            return priors.discrete_scale(_get(d, "atoms", path, list), _get(d, "weights", path, list))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.name: unknown scale distribution {name!r}")


def _parse_montecarlo(d, path) -> Optional[MonteCarloSpec]:
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    _check_keys(d, {"n", "n_trials", "master_seed", "lasso_tol", "lasso_max_iter"}, path)
    spec = MonteCarloSpec(
        n=_get(d, "n", path, int),
        n_trials=_get(d, "n_trials", path, int),
        master_seed=_get(d, "master_seed", path, int, 0),
        lasso_tol=float(_get(d, "lasso_tol", path, (int, float), 1e-8)),
        lasso_max_iter=_get(d, "lasso_max_iter", path, int, 100_000),
    )
    if spec.n < 1 or spec.n_trials < 1:
        raise ConfigError(f"{path}: n and n_trials must be >= 1")
    if not 0 <= spec.master_seed < 2**64:
        raise ConfigError(f"{path}.master_seed: must be a 64-bit unsigned integer")
    return spec


def parse_experiment(d: dict, path: str) -> Experiment:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    allowed = {
        "name", "description", "prior", "scale", "estimator", "beta", "sigma0_sq", "snr0_db",
        "sweep", "scale_known", "support", "montecarlo", "outputs", "quadrature",
    }  # fmt: skip
    _check_keys(d, allowed, path)
    num = (int, float)
    name = _get(d, "name", path, str)
    prior = parse_prior(_get(d, "prior", path, dict), f"{path}.prior")
    scale = parse_scale(_get(d, "scale", path, dict, {"name": "constant", "s": 1.0}), f"{path}.scale")

    est = _get(d, "estimator", path, dict)
    epath = f"{path}.estimator"
    _check_keys(est, {"family", "gamma"}, epath)
    family = _get(est, "family", epath, str)
    if family not in scalar.FAMILIES:
        raise ConfigError(f"{epath}.family: unknown estimator {family!r} (expected one of {', '.join(scalar.FAMILIES)})")
    gamma = _get(est, "gamma", epath, None, None)
    if gamma is not None and gamma != "lmmse":
        if isinstance(gamma, bool) or not isinstance(gamma, num) or not gamma > 0:
            raise ConfigError(f"{epath}.gamma: must be a positive number, \"lmmse\" or null")
        gamma = float(gamma)
    if family == scalar.LINEAR and gamma is None:
        gamma = "lmmse"
    if family == scalar.MMSE and gamma is not None:
        raise ConfigError(f"{epath}.gamma: the mmse estimator takes no regularisation")

    sw = _get(d, "sweep", path, dict)
    spath = f"{path}.sweep"
    _check_keys(sw, {"parameter", "values"}, spath)
    param = _get(sw, "parameter", spath, str)
    if param not in SWEEP_PARAMETERS:
        raise ConfigError(f"{spath}.parameter: must be one of {', '.join(SWEEP_PARAMETERS)}")
    values = _get(sw, "values", spath, list)
    if not values or not all(isinstance(v, num) and not isinstance(v, bool) for v in values):
        raise ConfigError(f"{spath}.values: need a non-empty list of numbers")
    values = tuple(float(v) for v in values)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{spath}.values: must be strictly increasing")
    if param == "gamma" and family == scalar.MMSE:
        raise ConfigError(f"{spath}.parameter: cannot sweep gamma for the mmse estimator")

    beta = _get(d, "beta", path, num, None)
    sigma0_sq = _get(d, "sigma0_sq", path, num, None)
    snr0_db = _get(d, "snr0_db", path, num, None)
    if param != "beta" and beta is None:
        raise ConfigError(f"{path}.beta: required unless sweeping beta")
    if param == "beta" and any(v < 0 for v in values):
        raise ConfigError(f"{spath}.values: beta must be >= 0")
    if param != "snr0_db" and (sigma0_sq is None) == (snr0_db is None):
        raise ConfigError(f"{path}: give exactly one of sigma0_sq and snr0_db")
    if sigma0_sq is not None and not sigma0_sq > 0:
        raise ConfigError(f"{path}.sigma0_sq: must be > 0")
    if param == "gamma" and any(v <= 0 for v in values):
        raise ConfigError(f"{spath}.values: gamma must be > 0")

    scale_known = _get(d, "scale_known", path, bool, True)
    support = _get(d, "support", path, bool, False)
    if support and family == scalar.MMSE:
        raise ConfigError(f"{path}.support: support recovery needs a MAP estimator")
    if support and not np.any(prior.zero_mask):
        raise ConfigError(f"{path}.support: prior has no point mass at zero")
    mc = _parse_montecarlo(_get(d, "montecarlo", path, dict, None), f"{path}.montecarlo")
    if mc is not None and family not in (scalar.LINEAR, scalar.LASSO):
        raise ConfigError(f"{path}.montecarlo: only linear and lasso estimators can be simulated")

    outputs = {}
    raw_out = _get(d, "outputs", path, list, None)
    if raw_out is None:
        outputs["predict"] = f"{name}_predict.csv"
        if mc is not None:
            outputs["simulate"] = f"{name}_simulate.csv"
            outputs["cdf"] = f"{name}_cdf.csv"
    else:
        for i, o in enumerate(raw_out):
            opath = f"{path}.outputs[{i}]"
            if not isinstance(o, dict):
                raise ConfigError(f"{opath}: expected an object")
            _check_keys(o, {"metric", "path"}, opath)
            metric = _get(o, "metric", opath, str)
            if metric not in METRICS:
                raise ConfigError(f"{opath}.metric: unknown metric {metric!r} (expected one of {', '.join(METRICS)})")
            if metric != "predict" and mc is None:
                raise ConfigError(f"{opath}.metric: {metric!r} needs a montecarlo section")
            outputs[metric] = _get(o, "path", opath, str)

    quad = QuadratureSpec()
    qd = _get(d, "quadrature", path, dict, None)
    if qd is not None:
        qpath = f"{path}.quadrature"
        _check_keys(qd, {"n_hermite", "points_per_sd", "damping", "tol", "max_iter"}, qpath)
        try:
            quad = replace(quad, **qd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{qpath}: {exc}") from exc

    exp = Experiment(
        name=name,
        prior=prior,
        scale=scale,
        family=family,
        gamma=gamma,
        beta=None if beta is None else float(beta),
        sigma0_sq=None if sigma0_sq is None else float(sigma0_sq),
        snr0_db=None if snr0_db is None else float(snr0_db),
        sweep_parameter=param,
        sweep_values=values,
        scale_known=scale_known,
        support=support,
        montecarlo=mc,
        outputs=outputs,
        quad=quad,
    )
    if mc is not None:
        for v in values:
            if point_beta(exp, v) <= 0:
                raise ConfigError(f"{path}.montecarlo: simulation needs beta > 0")
    return exp


def parse_experiment_file(text: str, source: str = "<config>") -> list[Experiment]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    _check_keys(doc, {"schema_version", "description", "experiments"}, source)
    ver = _get(doc, "schema_version", source, str)
    if ver != SCHEMA_VERSION:
        raise ConfigError(f"{source}.schema_version: unsupported version {ver!r} (expected {SCHEMA_VERSION!r})")
    exps = _get(doc, "experiments", source, list)
    if not exps:
        raise ConfigError(f"{source}.experiments: empty")
    out = [parse_experiment(e, f"experiments[{i}]") for i, e in enumerate(exps)]
    names = [e.name for e in out]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"{source}.experiments: duplicate name(s) {', '.join(dup)}")
    paths = [p for e in out for p in e.outputs.values()]
    clash = sorted({p for p in paths if paths.count(p) > 1})
    if clash:
        raise ConfigError(f"{source}: output path(s) used twice: {', '.join(clash)}")
    return out


# ---------------------------------------------------------------- presets


def preset_names() -> list[str]:
    files = resources.files("replicamap").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}")
    return resources.files("replicamap").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")


def preset_description(name: str) -> str:
    return json.loads(preset_text(name)).get("description", "")


def load_preset(name: str) -> list[Experiment]:
    return parse_experiment_file(preset_text(name), f"preset:{name}")


# ---------------------------------------------------------------- sweep points


def point_beta(exp: Experiment, value: float) -> float:
    return value if exp.sweep_parameter == "beta" else exp.beta


def point_sigma0_sq(exp: Experiment, value: float) -> float:
    if exp.sweep_parameter == "snr0_db":
        return metrics.sigma0_for_snr(value, exp.prior, exp.scale)
    if exp.sigma0_sq is not None:
        return exp.sigma0_sq
    return metrics.sigma0_for_snr(exp.snr0_db, exp.prior, exp.scale)


def _model(exp: Experiment):
    """Prior and scale seen by the estimator: unknown scales are folded into the prior."""
    if exp.scale_known:
        return exp.prior, exp.scale
    return priors.fold_scale(exp.prior, exp.scale), priors.constant_scale(1.0)


def point_config(exp: Experiment, value: float) -> ProblemConfig:
    prior, scale = _model(exp)
    sigma0_sq = point_sigma0_sq(exp, value)
    if exp.sweep_parameter == "gamma":
        gamma = value
    elif exp.gamma == "lmmse":
        gamma = metrics.lmmse_gamma(prior, sigma0_sq)
    else:
        gamma = exp.gamma
    if exp.family == scalar.MMSE:
        est = scalar.mmse()
    else:
        est = scalar.EstimatorSpec(exp.family, gamma)
    return ProblemConfig(point_beta(exp, value), sigma0_sq, prior, scale, est)


def _nan_row(columns, status: str) -> dict:
    row = {c: math.nan for c in columns}
    row["status"] = status
    return row


def predict_point(exp: Experiment, value: float) -> tuple[dict, Optional[metrics.ReplicaPrediction]]:
    """One predict row plus the prediction (None when the solve failed)."""
    cfg = point_config(exp, value)
    try:
        pred = metrics.predict(cfg, exp.quad, support=exp.support)
    except solver.InfeasibleRegularization:
        return _nan_row(PREDICT_COLUMNS, "infeasible"), None
    except solver.SolverError:
        return _nan_row(PREDICT_COLUMNS, "no_convergence"), None
    lv = pred.levels
    status = "ok" if lv.converged else "no_convergence"
    row = {
        "sigma_eff_sq": lv.sigma_eff_sq,
        "gamma_p": lv.gamma_p,
        "gamma": pred.gamma,
        "mse": pred.mse,
        "se_db": pred.normalized_se_db,
        "signal_se_db": pred.signal_se_db,
        "eta": pred.eta,
        "p_misdetect": math.nan if pred.p_misdetect is None else pred.p_misdetect,
        "n_solutions": pred.n_solutions,
        "residual": lv.residual,
        "iterations": lv.iterations,
        "status": status,
    }
    return row, pred


@dataclass
class SimulationPoint:
    row: dict
    trials: list = field(default_factory=list)
    cdf: list = field(default_factory=list)


def simulate_point(exp: Experiment, value: float, workers: int = 1, seed: Optional[int] = None) -> SimulationPoint:
    mc = exp.montecarlo
    if mc is None:
        raise ConfigError(f"{exp.name}: no montecarlo section")
    cfg = point_config(exp, value)
    gamma = cfg.estimator.gamma
    thresholds = None
    if gamma is None or exp.support:
        _, pred = predict_point(exp, value)
        if pred is None or not pred.levels.converged:
            return SimulationPoint(_nan_row(SIMULATE_COLUMNS, "prediction_failed"))
        if gamma is None:
            gamma = pred.gamma
        if exp.support:
            thresholds = tuple(pred.thresholds[float(s)] for s in cfg.scale.atoms)
    if not (gamma is not None and math.isfinite(gamma) and gamma > 0):
        return SimulationPoint(_nan_row(SIMULATE_COLUMNS, "no_regularization"))
    tc = montecarlo.TrialConfig(
        n=mc.n,
        beta=cfg.beta,
        prior=exp.prior,
        scale=exp.scale,
        sigma0_sq=cfg.sigma0_sq,
        estimator=scalar.EstimatorSpec(exp.family, gamma),
        scale_known=exp.scale_known,
        master_seed=mc.master_seed if seed is None else seed,
        n_trials=mc.n_trials,
        lasso_tol=mc.lasso_tol,
        lasso_max_iter=mc.lasso_max_iter,
        thresholds=thresholds,
    )
    res = montecarlo.run_experiment(tc, workers)
    s = res.summary
    row = {k: s[k] for k in SIMULATE_COLUMNS if k in s}
    row["gamma"] = gamma
    row["status"] = "ok" if s["non_converged"] == 0 else "max_iter"
    trials = [
        {
            "trial_index": t.trial_index,
            "seed": t.seed,
            "se_db": t.se_db,
            "misdetect": t.misdetect_rate,
            "status": t.status,
            "zero_signal": int(t.zero_signal),
        }
        for t in res.trials
    ]
    cdf = [{"se_db_grid": g, "cdf": c} for g, c in zip(s["se_cdf_grid"], s["se_cdf"])]
    return SimulationPoint(row, trials, cdf)
