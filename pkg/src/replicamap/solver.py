"""Fixed-point equations for the effective noise levels.

MAP estimators (linear, lasso, zero-norm) satisfy

    sigma_eff^2 = sigma0^2 + beta E[s |x - xhat|^2]
    gamma_p     = gamma    + beta E[s sigma^2(z, gamma_p / s)]

and posterior-mean estimators satisfy the analogous pair with posterior MSEs.
Both are solved by damped successive substitution from several starting
points; every distinct converged solution is returned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import channel, scalar
from .priors import Prior, ScaleDist, second_moment

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """No starting point converged; ``best`` holds the closest attempt."""

    def __init__(self, message: str, best: Optional["NoiseLevels"] = None):
        super().__init__(message)
        self.best = best


class InfeasibleRegularization(SolverError):
    pass


@dataclass(frozen=True)
class ProblemConfig:
    beta: float
    sigma0_sq: float
    prior: Prior
    scale: ScaleDist
    estimator: scalar.EstimatorSpec

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be > 0")

    def with_gamma(self, gamma: float) -> "ProblemConfig":
        return replace(self, estimator=self.estimator.with_gamma(gamma))

    @property
    def signal_power(self) -> float:
        """``E[s x^2]``: the MSE term when the estimate is identically zero."""
        return self.scale.mean() * second_moment(self.prior)


@dataclass(frozen=True)
class NoiseLevels:
    sigma_eff_sq: float
    gamma_p: float
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0


@dataclass(frozen=True)
class QuadratureSpec:
    n_hermite: int = 61
    points_per_sd: int = 24
    damping: float = 0.5
    tol: float = 1e-10
    max_iter: int = 10_000
    init_grid: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.n_hermite < 1 or self.n_hermite % 2 == 0:
            raise ValueError("n_hermite must be a positive odd integer")
        if self.points_per_sd < 2:
            raise ValueError("points_per_sd must be >= 2")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")


def default_init_grid(config: ProblemConfig) -> list[float]:
    s0 = config.sigma0_sq
    return [s0, 10 * s0, s0 + config.beta * config.signal_power]


def _relative_residual(a: float, b: float, fa: float, fb: float) -> float:
    r1 = abs(a - fa) / a
    r2 = 0.0 if math.isinf(b) and math.isinf(fb) else abs(b - fb) / b
    return max(r1, r2)


def _map_family(config: ProblemConfig) -> str:
    family = config.estimator.family
    if family not in scalar.MAP_FAMILIES:
        raise ValueError(f"expected a MAP estimator, got {family!r}")
    return family


def map_rhs(config: ProblemConfig, levels: NoiseLevels, quad: QuadratureSpec = QuadratureSpec()) -> tuple[float, float]:
    """Right-hand sides of the two MAP fixed-point equations at ``levels``."""
    family = _map_family(config)
    gamma = config.estimator.gamma
    if gamma is None:
        raise ValueError("estimator gamma is unset; use optimize_regularization")
    sig, gp = levels.sigma_eff_sq, levels.gamma_p
    if not (sig > 0 and gp > 0):
        raise ValueError("noise levels must be positive")
    if config.beta == 0:
        return config.sigma0_sq, gamma
    with np.errstate(over="raise", invalid="raise"):
        mse_s = channel.expect(
            channel.map_mse_table(family, config.prior, config.scale, sig, gp),
            config.prior,
            config.scale,
            weight_by_scale=True,
        )
        var_s = channel.map_variance_term(family, config.prior, config.scale, sig, gp)
    out = (config.sigma0_sq + config.beta * mse_s, gamma + config.beta * var_s)
    if any(math.isnan(v) for v in out):
        raise FloatingPointError(f"NaN in map_rhs at sigma_eff_sq={sig!r}, gamma_p={gp!r}")
    return out


def _iterate(rhs, start: tuple[float, float], quad: QuadratureSpec) -> NoiseLevels:
    a, b = start
    d = quad.damping
    best = NoiseLevels(a, b, False, 0, math.inf)
    for it in range(1, quad.max_iter + 1):
        try:
            fa, fb = rhs(a, b)
        except (FloatingPointError, OverflowError) as exc:
            log.debug("iteration aborted: %s", exc)
            return best
        res = _relative_residual(a, b, fa, fb)
        if res < best.residual:
            best = NoiseLevels(a, b, False, it, res)
        if res < quad.tol:
            return NoiseLevels(a, b, True, it, res)
        a = (1 - d) * a + d * fa
        b = (1 - d) * b + d * fb
        if not (math.isfinite(a) and math.isfinite(b)) or b > 1e300:
            log.debug("iteration diverged at step %d", it)
            return best
    return best


def _dedup(solutions: list[NoiseLevels], rel: float = 1e-6) -> list[NoiseLevels]:
    out: list[NoiseLevels] = []
    for sol in sorted(solutions, key=lambda s: s.sigma_eff_sq):
        if any(
            abs(sol.sigma_eff_sq - o.sigma_eff_sq) <= rel * o.sigma_eff_sq
            and abs(sol.gamma_p - o.gamma_p) <= rel * o.gamma_p
            for o in out
        ):
            continue
        out.append(sol)
    return out


def _collect(rhs, starts, quad: QuadratureSpec, what: str) -> list[NoiseLevels]:
    results = [_iterate(rhs, st, quad) for st in starts]
    good = [r for r in results if r.converged]
    if not good:
        best = min(results, key=lambda r: r.residual)
        raise SolverError(f"{what}: no starting point converged (best residual {best.residual:.3g})", best)
    sols = _dedup(good)
    if len(sols) > 1:
        log.info("%s: %d distinct fixed points", what, len(sols))
    return sols


def solve_map_fixed_point(config: ProblemConfig, quad: QuadratureSpec = QuadratureSpec()) -> list[NoiseLevels]:
    """All distinct solutions of the MAP fixed-point pair, sorted by ``sigma_eff_sq``."""
    _map_family(config)
    gamma = config.estimator.gamma
    if gamma is None:
        raise ValueError("estimator gamma is unset; use optimize_regularization")
    if config.beta == 0:
        return [NoiseLevels(config.sigma0_sq, gamma, True, 0, 0.0)]
    grid = quad.init_grid if quad.init_grid is not None else default_init_grid(config)

    def rhs(a, b):
        return map_rhs(config, NoiseLevels(a, b), quad)

    return _collect(rhs, [(float(g), gamma) for g in grid], quad, "MAP fixed point")


def _mmse_setup(config: ProblemConfig, postulated_noise_sq: Optional[float]):
    est = config.estimator
    if est.family != scalar.MMSE:
        raise ValueError("solve_mmse_fixed_point needs an MMSE estimator spec")
    post_prior = est.postulated_prior if est.postulated_prior is not None else config.prior
    if postulated_noise_sq is None:
        postulated_noise_sq = est.postulated_noise if est.postulated_noise is not None else config.sigma0_sq
    if not postulated_noise_sq > 0:
        raise ValueError("postulated noise must be > 0")
    matched = post_prior == config.prior and postulated_noise_sq == config.sigma0_sq
    return post_prior, float(postulated_noise_sq), matched


def mmse_rhs(
    config: ProblemConfig,
    levels: NoiseLevels,
    postulated_noise_sq: Optional[float] = None,
    quad: QuadratureSpec = QuadratureSpec(),
) -> tuple[float, float]:
    """Right-hand sides of the posterior-mean fixed-point pair.

    ``levels.gamma_p`` carries the postulated effective noise level.
    """
    post_prior, post_noise, matched = _mmse_setup(config, postulated_noise_sq)
    if config.beta == 0:
        return config.sigma0_sq, post_noise
    sig, sigp = levels.sigma_eff_sq, levels.gamma_p
    prior, scale = config.prior, config.scale
    t1 = channel.mmse_mse_table(prior, post_prior, scale, sig, sigp, quad.points_per_sd)
    e1 = channel.expect(t1, prior, scale, weight_by_scale=True)
    if matched and sig == sigp:
        e2 = e1
    else:
        t2 = channel.mmse_mse_table(prior, post_prior, scale, sig, sigp, quad.points_per_sd, postulated_channel=True)
        e2 = channel.expect(t2, prior, scale, weight_by_scale=True)
    out = (config.sigma0_sq + config.beta * e1, post_noise + config.beta * e2)
    if any(math.isnan(v) for v in out):
        raise FloatingPointError(f"NaN in mmse_rhs at {levels!r}")
    return out


def solve_mmse_fixed_point(
    config: ProblemConfig,
    postulated_noise_sq: Optional[float] = None,
    quad: QuadratureSpec = QuadratureSpec(),
) -> list[NoiseLevels]:
    """Solutions of the posterior-mean fixed-point pair.

    In the matched case the two equations coincide and a single equation is
    iterated, so the returned levels have ``gamma_p == sigma_eff_sq``.
    """
    post_prior, post_noise, matched = _mmse_setup(config, postulated_noise_sq)
    if config.beta == 0:
        return [NoiseLevels(config.sigma0_sq, post_noise, True, 0, 0.0)]
    grid = quad.init_grid if quad.init_grid is not None else default_init_grid(config)

    if matched:

        def rhs(a, b):
            fa, _ = mmse_rhs(config, NoiseLevels(a, a), post_noise, quad)
            return fa, fa

        starts = [(float(g), float(g)) for g in grid]
    else:

        def rhs(a, b):
            return mmse_rhs(config, NoiseLevels(a, b), post_noise, quad)

        starts = [(float(g), post_noise) for g in grid]
    return _collect(rhs, starts, quad, "MMSE fixed point")


@dataclass(frozen=True)
class Regularization:
    """Outcome of :func:`optimize_regularization`.

    ``at_boundary`` is set when the best choice is ``gamma_p -> inf`` (the
    all-zero estimate); ``gamma`` and ``gamma_p`` are then ``inf``.
    """

    gamma: float
    levels: NoiseLevels
    active_probability: float
    outer_iterations: int
    at_boundary: bool = False


def _weighted_map_mse(family, prior, scale, sigma_eff_sq, gamma_p) -> float:
    return channel.expect(
        channel.map_mse_table(family, prior, scale, sigma_eff_sq, gamma_p), prior, scale, weight_by_scale=True
    )


def _gamma_p_range(family: str, config: ProblemConfig, sigma_eff_sq: float) -> tuple[float, float]:
    s_max = float(config.scale.atoms.max())
    s_min = float(config.scale.atoms.min())
    x_max = float(np.max(np.abs(config.prior.means) + 8 * np.sqrt(config.prior.variances)))
    # threshold per atom spans far below the noise level to far above signal + noise
    top = (x_max + 12 * math.sqrt(sigma_eff_sq / s_min))
    if family == scalar.LASSO:
        lo = 1e-4 * math.sqrt(sigma_eff_sq * s_min)
        hi = top * s_max
    else:
        lo = 1e-6 * sigma_eff_sq
        hi = 0.5 * top**2 * s_max
    return lo, hi


def min_over_gamma_p(
    family: str,
    config: ProblemConfig,
    sigma_eff_sq: float,
    n_grid: int = 200,
    near: Optional[float] = None,
) -> tuple[float, float]:
    """Minimise ``E[s |x - xhat|^2]`` over ``gamma_p`` subject to ``beta P(|z| > thr) < 1``.

    Returns ``(gamma_p, value)``; ``gamma_p`` is ``inf`` when the zero
    estimate beats every finite choice.  ``near`` warm-starts the search in a
    narrow log-window around a previous optimum; if the optimum lands on the
    window edge the full scan is used instead.
    """
    prior, scale, beta = config.prior, config.scale, config.beta

    def f(lg):
        return _weighted_map_mse(family, prior, scale, sigma_eff_sq, math.exp(lg))

    def excess(lg):
        return beta * channel.active_probability(family, prior, scale, sigma_eff_sq, math.exp(lg)) - 1.0

    lo, hi = _gamma_p_range(family, config, sigma_eff_sq)
    llo, lhi = math.log(lo), math.log(hi)
    if excess(lhi) >= 0:
        raise InfeasibleRegularization("no feasible regularization: beta * P(|z| > threshold) >= 1 everywhere")
    if excess(llo) >= 0:
        edge = brentq(excess, llo, lhi, xtol=1e-13, rtol=1e-13)
        llo = edge + 1e-9 * max(1.0, abs(edge))
    boundary_val = float(channel.expect(channel.signal_power_table(prior, scale), prior, scale, weight_by_scale=True))

    if near is not None and math.isfinite(near):
        c = math.log(near)
        a, b = max(c - 0.5, llo), min(c + 0.5, lhi)
        grid = np.linspace(a, b, 11)
        vals = np.array([f(g) for g in grid])
        i = int(np.argmin(vals))
        if 0 < i < len(grid) - 1:
            return _refine(f, grid, vals, i, boundary_val)
    grid = np.linspace(llo, lhi, n_grid)
    vals = np.array([f(g) for g in grid])
    i = int(np.argmin(vals))
    if boundary_val <= vals[i] and i == n_grid - 1:
        return math.inf, boundary_val
    return _refine(f, grid, vals, i, boundary_val)


def _refine(f, grid, vals, i, boundary_val):
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    lg, val = (res.x, float(res.fun)) if res.fun <= vals[i] else (grid[i], float(vals[i]))
    if boundary_val < val:
        return math.inf, boundary_val
    return math.exp(lg), val


def optimize_regularization(config: ProblemConfig, quad: QuadratureSpec = QuadratureSpec()) -> Regularization:
    """Choose ``gamma`` minimising the predicted effective noise.

    Iterates ``sigma(t+1) = sigma0^2 + beta min_gamma_p E[s |x - xhat|^2]`` from
    the high starting value ``sigma0^2 + beta E[s x^2]`` and maps the final
    ``gamma_p`` back to ``gamma = gamma_p (1 - beta P(|z| > thr))``.
    """
    family = config.estimator.family
    if family not in (scalar.LASSO, scalar.ZERO_NORM):
        raise ValueError("optimize_regularization supports lasso and zero-norm only")
    sig = config.sigma0_sq + config.beta * config.signal_power
    gp = math.inf
    converged = False
    it = 0
    for it in range(1, quad.max_iter + 1):
        # periodic full scans guard the warm start against a jump between local minima
        gp, val = min_over_gamma_p(family, config, sig, near=None if it % 10 == 1 else gp)
        new = config.sigma0_sq + config.beta * val
        step = abs(new - sig)
        sig = new
        if step < quad.tol * sig:
            converged = True
            break
    if math.isinf(gp):
        levels = NoiseLevels(sig, math.inf, converged, it, 0.0)
        return Regularization(math.inf, levels, 0.0, it, at_boundary=True)
    p = channel.active_probability(family, config.prior, config.scale, sig, gp)
    gamma = gp * (1.0 - config.beta * p)
    fa, fb = map_rhs(config.with_gamma(gamma), NoiseLevels(sig, gp), quad)
    levels = NoiseLevels(sig, gp, converged, it, _relative_residual(sig, gp, fa, fb))
    return Regularization(gamma, levels, p, it)


def multiuser_efficiency(levels: NoiseLevels, sigma0_sq: float) -> float:
    return sigma0_sq / levels.sigma_eff_sq


def linear_closed_form(beta: float, sigma0_sq: float, signal_var: float = 1.0) -> float:
    """Positive root of ``sig = sigma0^2 + beta P sig / (P + sig)`` (constant unit scale).

    With ``P = signal_var`` this is the matched linear-MMSE effective noise.
    """
    P = signal_var
    # sig^2 + (P - sigma0^2 - beta P) sig - sigma0^2 P = 0
    b = P - sigma0_sq - beta * P
    disc = b * b + 4 * sigma0_sq * P
    root = math.sqrt(disc)
    # pick the cancellation-free form of the positive root
    return (root - b) / 2 if b <= 0 else 2 * sigma0_sq * P / (root + b)
