"""Performance predictions read off the equivalent scalar channel."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from . import channel, scalar, solver
from .priors import second_moment
from .solver import NoiseLevels, ProblemConfig, QuadratureSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupportRule:
    """Per-scale-atom thresholds on ``|xhat|``; ``thresholds[j]`` pairs with ``scale.atoms[j]``."""

    thresholds: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float).ravel()
        if np.any(np.isnan(t)) or np.any(t < 0):
            raise ValueError("thresholds must be nonnegative")
        object.__setattr__(self, "thresholds", t)

    @classmethod
    def constant(cls, t: float, n_atoms: int = 1) -> "SupportRule":
        return cls(np.full(n_atoms, float(t)))


@dataclass(frozen=True)
class ReplicaPrediction:
    levels: NoiseLevels
    mse: float
    normalized_se_db: float
    signal_mse: float
    signal_se_db: float
    eta: float
    snr0_db: float
    gamma: float
    n_solutions: int = 1
    p_misdetect: Optional[float] = None
    thresholds: Optional[dict] = None
    all_levels: tuple = field(default=(), repr=False)


def _db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def predicted_mse(
    config: ProblemConfig, levels: NoiseLevels, quad: QuadratureSpec = QuadratureSpec(), weight_by_scale: bool = False
) -> float:
    """``E|x - xhat|^2`` on the scalar channel (``E[s |x - xhat|^2]`` if weighted)."""
    est = config.estimator
    if est.is_map:
        table = channel.map_mse_table(est.family, config.prior, config.scale, levels.sigma_eff_sq, levels.gamma_p)
    else:
        post = est.postulated_prior if est.postulated_prior is not None else config.prior
        table = channel.mmse_mse_table(
            config.prior, post, config.scale, levels.sigma_eff_sq, levels.gamma_p, quad.points_per_sd
        )
    return channel.expect(table, config.prior, config.scale, weight_by_scale)


def _detect_cut(family: str, lam: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``|z|`` level above which ``|xhat| > t`` (per atom)."""
    if family == scalar.LINEAR:
        return t * (1.0 + lam)
    if family == scalar.LASSO:
        return np.where(np.isfinite(lam), lam + t, np.inf)
    if family == scalar.ZERO_NORM:
        return np.maximum(np.sqrt(2.0 * lam), t)
    raise ValueError(f"support detection needs a MAP estimator, got {family!r}")


def _atom_costs(config: ProblemConfig, levels: NoiseLevels, thresholds: np.ndarray) -> np.ndarray:
    """Misdetection probability conditional on each scale atom."""
    prior, scale = config.prior, config.scale
    lam = levels.gamma_p / scale.atoms
    cut = _detect_cut(config.estimator.family, lam, thresholds)
    exc = channel.exceed_table(prior, scale, levels.sigma_eff_sq, cut)
    zero = prior.zero_mask
    w = prior.weights
    miss = w[~zero] @ (1.0 - exc[~zero])
    false_alarm = w[zero] @ exc[zero]
    return miss + false_alarm


def misdetect_probability(
    config: ProblemConfig, levels: NoiseLevels, rule: SupportRule, quad: QuadratureSpec = QuadratureSpec()
) -> float:
    """``P(1{|xhat| > t(s)} != 1{x != 0})`` on the scalar channel."""
    t = np.broadcast_to(rule.thresholds, config.scale.atoms.shape)
    p = float(config.scale.weights @ _atom_costs(config, levels, t))
    return min(max(p, 0.0), 1.0)


def threshold_bracket(config: ProblemConfig, levels: NoiseLevels) -> np.ndarray:
    return 10.0 * np.sqrt(second_moment(config.prior) + levels.sigma_eff_sq / config.scale.atoms)


def optimize_thresholds(
    config: ProblemConfig, levels: NoiseLevels, quad: QuadratureSpec = QuadratureSpec(), n_grid: int = 32
) -> tuple[SupportRule, float]:
    """Per-atom thresholds minimising the misdetection probability.

    Each atom is a 1-D problem on ``[0, t_max]``: a log grid (plus ``t = 0``)
    locates candidate minima, each refined by bounded Brent search.
    """
    t_max = threshold_bracket(config, levels)
    n = config.scale.n_atoms
    best_t = np.empty(n)
    for j in range(n):

        def cost(t, j=j):
            # atom j's cost depends on its own threshold only
            return float(_atom_costs(config, levels, np.full(n, t))[j])

        grid = np.concatenate([[0.0], np.geomspace(t_max[j] * 1e-4, t_max[j], n_grid)])
        vals = np.array([cost(t) for t in grid])
        cand_t, cand_v = grid[int(np.argmin(vals))], float(vals.min())
        local = [i for i in range(len(grid)) if vals[i] <= vals[max(i - 1, 0)] and vals[i] <= vals[min(i + 1, len(grid) - 1)]]
        for i in local:
            a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
            if b <= a:
                continue
            res = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-10 * t_max[j]})
            if res.fun < cand_v:
                cand_t, cand_v = float(res.x), float(res.fun)
        best_t[j] = cand_t
    rule = SupportRule(best_t)
    return rule, misdetect_probability(config, levels, rule, quad)


def snr_metrics(config: ProblemConfig, levels: NoiseLevels) -> dict:
    """Per-atom SNR with and without side information, in dB, plus ``eta``."""
    p = second_moment(config.prior)
    s = config.scale.atoms
    snr0 = s * p / config.sigma0_sq
    snr = s * p / levels.sigma_eff_sq
    with np.errstate(divide="ignore"):
        return {
            "snr0_db": 10 * np.log10(snr0),
            "snr_db": 10 * np.log10(snr),
            "eta": solver.multiuser_efficiency(levels, config.sigma0_sq),
        }


def sigma0_for_snr(snr0_db: float, prior, scale) -> float:
    """Noise variance giving ``E[s] E|x|^2 / sigma0^2`` equal to ``snr0_db``."""
    return scale.mean() * second_moment(prior) / 10 ** (snr0_db / 10)


def lmmse_gamma(prior, sigma0_sq: float) -> float:
    """Regularisation that turns the ``|x|^2 / 2`` penalty into the linear MMSE estimator."""
    return sigma0_sq / second_moment(prior)


def predict(
    config: ProblemConfig,
    quad: QuadratureSpec = QuadratureSpec(),
    support: bool = False,
) -> ReplicaPrediction:
    """Solve the fixed points and assemble a :class:`ReplicaPrediction`.

    Lasso/zero-norm configs with ``gamma=None`` are regularised optimally.
    When several fixed points exist the smallest effective noise is reported
    and the count is recorded in ``n_solutions``.
    """
    est = config.estimator
    if est.family == scalar.MMSE:
        sols = solver.solve_mmse_fixed_point(config, None, quad)
        gamma = float("nan")
    elif est.gamma is None:
        reg = solver.optimize_regularization(config, quad)
        config = config.with_gamma(reg.gamma) if math.isfinite(reg.gamma) else config
        sols = [reg.levels]
        gamma = reg.gamma
    else:
        sols = solver.solve_map_fixed_point(config, quad)
        gamma = est.gamma
    if len(sols) > 1:
        log.warning("%d fixed points; reporting the smallest effective noise", len(sols))
    levels = sols[0]
    p = second_moment(config.prior)
    mse = predicted_mse(config, levels, quad)
    smse = predicted_mse(config, levels, quad, weight_by_scale=True)
    p_err = rule_map = None
    if support:
        rule, p_err = optimize_thresholds(config, levels, quad)
        rule_map = {float(s): float(t) for s, t in zip(config.scale.atoms, rule.thresholds)}
    return ReplicaPrediction(
        levels=levels,
        mse=mse,
        normalized_se_db=_db(mse / p) if p > 0 else math.nan,
        signal_mse=smse,
        signal_se_db=_db(smse / (p * config.scale.mean())) if p > 0 else math.nan,
        eta=solver.multiuser_efficiency(levels, config.sigma0_sq),
        snr0_db=_db(config.scale.mean() * p / config.sigma0_sq),
        gamma=gamma,
        n_solutions=len(sols),
        p_misdetect=p_err,
        thresholds=rule_map,
        all_levels=tuple(sols),
    )
