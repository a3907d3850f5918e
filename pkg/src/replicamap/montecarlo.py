"""Finite-dimensional simulation of ``y = A S^{1/2} x + w``.

Each trial draws its randomness from a Philox stream keyed by
``(master_seed, trial_index)``, so any trial can be regenerated on its own and
results do not depend on how trials are spread over worker processes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numba
import numpy as np
import scipy.linalg

from . import priors, scalar
from .priors import Prior, ScaleDist

log = logging.getLogger(__name__)

CDF_GRID_DB = np.linspace(-50.0, 10.0, 200)
BOOTSTRAP_RESAMPLES = 10_000
CONVERGED = "converged"
MAX_ITER = "max_iter"


@dataclass(frozen=True)
class TrialConfig:
    n: int
    beta: float
    prior: Prior
    scale: ScaleDist
    sigma0_sq: float
    estimator: scalar.EstimatorSpec
    scale_known: bool = True
    master_seed: int = 0
    n_trials: int = 1
    lasso_tol: float = 1e-8
    lasso_max_iter: int = 100_000
    thresholds: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.n < 1 or self.n_trials < 1:
            raise ValueError("need n >= 1 and n_trials >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.m < 1:
            raise ValueError("m = round(n / beta) must be >= 1")
        if not self.sigma0_sq >= 0:
            raise ValueError("sigma0_sq must be >= 0")
        if self.estimator.family not in (scalar.LINEAR, scalar.LASSO):
            raise ValueError("only linear and lasso estimators can be simulated")
        if self.estimator.gamma is None:
            raise ValueError("trial estimator needs an explicit gamma")

    @property
    def m(self) -> int:
        return int(round(self.n / self.beta))


class Problem(NamedTuple):
    A: np.ndarray
    s: np.ndarray
    atom: np.ndarray
    u: np.ndarray
    y: np.ndarray

    @property
    def x_signal(self) -> np.ndarray:
        """Components as they enter ``A``: ``sqrt(s) * u``."""
        return np.sqrt(self.s) * self.u


class TrialResult(NamedTuple):
    trial_index: int
    seed: int
    se_db: float
    misdetect_rate: float
    status: str
    zero_signal: bool


def trial_rng(master_seed: int, trial_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, trial_index])))


def trial_seed(master_seed: int, trial_index: int) -> int:
    """A 64-bit integer identifying the trial stream (for logs and dumps)."""
    return int(np.random.SeedSequence([master_seed, trial_index]).generate_state(1, np.uint64)[0])


def generate_problem(cfg: TrialConfig, trial_index: int) -> Problem:
    rng = trial_rng(cfg.master_seed, trial_index)
    n, m = cfg.n, cfg.m
    A = rng.standard_normal((m, n)) / math.sqrt(m)
    atom, s = cfg.scale.sample(rng, n)
    u = priors.sample(cfg.prior, rng, n)
    w = math.sqrt(cfg.sigma0_sq) * rng.standard_normal(m)
    y = A @ (np.sqrt(s) * u) + w
    return Problem(A, s, atom, u, y)


def lmmse_dual(A: np.ndarray, S_diag: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    """``u = (A S A' + gamma I)^{-1} y`` by Cholesky, rejecting near-singular systems."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    B = A * np.sqrt(S_diag)
    K = B @ B.T
    K[np.diag_indices_from(K)] += gamma
    try:
        c, low = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(K)
        raise np.linalg.LinAlgError(f"ill-conditioned system, condition estimate {cond:.3g} ({exc})") from exc
    d = np.abs(np.diag(c))
    cond_est = (d.max() / d.min()) ** 2
    if cond_est > 1.0 / np.finfo(float).eps:
        raise np.linalg.LinAlgError(f"ill-conditioned system, condition estimate {cond_est:.3g}")
    return scipy.linalg.cho_solve((c, low), y, check_finite=False)


def lmmse_estimate(A: np.ndarray, S_diag: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    """``S^{1/2} A' (A S A' + gamma I)^{-1} y``."""
    return np.sqrt(S_diag) * (A.T @ lmmse_dual(A, S_diag, y, gamma))


@numba.njit(cache=True)
def _lasso_cd(G, c, gamma, tol, max_iter):
    n = c.shape[0]
    x = np.zeros(n)
    r = c.copy()  # r = c - G x = B'(y - B x)
    for sweep in range(1, max_iter + 1):
        max_delta = 0.0
        max_abs = 0.0
        for j in range(n):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = x[j]
            rho = r[j] + gjj * old
            if rho > gamma:
                new = (rho - gamma) / gjj
            elif rho < -gamma:
                new = (rho + gamma) / gjj
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                x[j] = new
                for k in range(n):
                    r[k] -= G[k, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
            if abs(new) > max_abs:
                max_abs = abs(new)
        if max_delta < tol * (1.0 + max_abs):
            # refresh the gradient to shed accumulated rounding, then test KKT
            for k in range(n):
                acc = c[k]
                for l in range(n):
                    acc -= G[k, l] * x[l]
                r[k] = acc
            worst = 0.0
            for j in range(n):
                if x[j] == 0.0:
                    v = abs(r[j]) - gamma * (1.0 + tol)
                else:
                    v = abs(r[j] - gamma * np.sign(x[j])) - tol
                if v > worst:
                    worst = v
            if worst <= 0.0:
                return x, sweep, True
    return x, max_iter, False


class LassoResult(NamedTuple):
    x: np.ndarray
    status: str
    sweeps: int


def lasso_estimate(
    A: np.ndarray, S_diag: np.ndarray, y: np.ndarray, gamma: float, tol: float = 1e-8, max_iter: int = 100_000
) -> LassoResult:
    """``argmin_x (1/2) ||y - A S^{1/2} x||^2 + gamma ||x||_1`` by cyclic coordinate descent.

    Equivalent to the ``1/(2 gamma)``-scaled form.  Stops once a sweep moves no
    coordinate by more than ``tol (1 + ||x||_inf)`` and the subgradient
    conditions hold within ``tol``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    B = A * np.sqrt(S_diag)
    G = np.ascontiguousarray(B.T @ B)
    c = B.T @ y
    x, sweeps, ok = _lasso_cd(G, c, float(gamma), float(tol), int(max_iter))
    return LassoResult(x, CONVERGED if ok else MAX_ITER, int(sweeps))


def kkt_violation(A, S_diag, y, gamma, x) -> np.ndarray:
    """Per-coordinate excess over the lasso subgradient conditions (<= 0 when optimal)."""
    B = A * np.sqrt(S_diag)
    g = B.T @ (y - B @ x)
    return np.where(x == 0, np.abs(g) - gamma, np.abs(g - gamma * np.sign(x)))


def normalized_se_db(x_hat: np.ndarray, x: np.ndarray) -> float:
    den = float(np.dot(x, x))
    if den == 0:
        return math.nan
    return 10.0 * math.log10(float(np.sum((x_hat - x) ** 2)) / den)


def run_trial(cfg: TrialConfig, trial_index: int) -> TrialResult:
    p = generate_problem(cfg, trial_index)
    S_est = p.s if cfg.scale_known else np.ones(cfg.n)
    gamma = cfg.estimator.gamma
    status = CONVERGED
    if cfg.estimator.family == scalar.LINEAR:
        est = lmmse_estimate(p.A, S_est, p.y, gamma)
    else:
        res = lasso_estimate(p.A, S_est, p.y, gamma, cfg.lasso_tol, cfg.lasso_max_iter)
        est, status = res.x, res.status
    # compare in the signal domain sqrt(s) u, whichever variable was estimated
    x_sig = p.x_signal
    xhat_sig = np.sqrt(p.s) * est if cfg.scale_known else est
    se = normalized_se_db(xhat_sig, x_sig)
    mis = math.nan
    if cfg.thresholds is not None:
        t = np.asarray(cfg.thresholds, dtype=float)
        t_j = t[p.atom] if cfg.scale_known else np.full(cfg.n, t[0])
        mis = float(np.mean((np.abs(est) > t_j) != (p.u != 0)))
    return TrialResult(trial_index, trial_seed(cfg.master_seed, trial_index), se, mis, status, math.isnan(se))


def _run_chunk(args):
    cfg, indices = args
    return [run_trial(cfg, i) for i in indices]


def run_trials(cfg: TrialConfig, workers: int = 1) -> list[TrialResult]:
    """All trials in trial-index order, independent of ``workers``."""
    idx = list(range(cfg.n_trials))
    if workers <= 1:
        return [run_trial(cfg, i) for i in idx]
    n_chunks = min(len(idx), workers * 4)
    chunks = [idx[k::n_chunks] for k in range(n_chunks)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [(cfg, ch) for ch in chunks]))
    results = [r for part in parts for r in part]
    results.sort(key=lambda r: r.trial_index)
    return results


def bootstrap_median_ci(values: np.ndarray, seed: int, resamples: int = BOOTSTRAP_RESAMPLES, level: float = 0.95):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xB007])))
    meds = np.empty(resamples)
    step = 1000
    for k in range(0, resamples, step):
        b = min(step, resamples - k)
        draws = values[rng.integers(0, values.size, size=(b, values.size))]
        meds[k : k + b] = np.median(draws, axis=1)
    a = (1 - level) / 2
    lo, hi = np.quantile(meds, [a, 1 - a])
    return float(lo), float(hi)


def empirical_cdf(values: np.ndarray, grid: np.ndarray = CDF_GRID_DB) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return np.full(grid.shape, math.nan)
    return np.searchsorted(v, grid, side="right") / v.size


@dataclass
class ExperimentResult:
    trials: list
    summary: dict = field(default_factory=dict)


def summarize(cfg: TrialConfig, trials: Sequence[TrialResult]) -> dict:
    se = np.array([t.se_db for t in trials if not t.zero_signal])
    mis = np.array([t.misdetect_rate for t in trials])
    lo, hi = bootstrap_median_ci(se, cfg.master_seed)
    q10, q90 = (np.quantile(se, [0.1, 0.9]) if se.size else (math.nan, math.nan))
    return {
        "n_trials": len(trials),
        "n_used": int(se.size),
        "n_zero_signal": int(sum(t.zero_signal for t in trials)),
        "non_converged": int(sum(t.status != CONVERGED for t in trials)),
        "median_se_db": float(np.median(se)) if se.size else math.nan,
        "mean_se_db": float(np.mean(se)) if se.size else math.nan,
        "ci_low": lo,
        "ci_high": hi,
        "q10_se_db": float(q10),
        "q90_se_db": float(q90),
        "mean_misdetect": float(np.mean(mis)) if cfg.thresholds is not None else math.nan,
        "m": cfg.m,
        "realized_ratio": cfg.n / cfg.m,
        "se_cdf_grid": CDF_GRID_DB,
        "se_cdf": empirical_cdf(se),
    }


def run_experiment(cfg: TrialConfig, workers: int = 1) -> ExperimentResult:
    trials = run_trials(cfg, workers)
    bad = sum(t.status != CONVERGED for t in trials)
    if bad:
        log.warning("%d of %d lasso solves hit max_iter", bad, len(trials))
    return ExperimentResult(trials, summarize(cfg, trials))
