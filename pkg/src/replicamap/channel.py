"""Expectations over the equivalent scalar channel.

Every table returned here has shape ``(K, J)``: one row per prior mixture
component and one column per scale atom.  Conditioned on a Gaussian component
``N(m, v)`` and an atom ``s``, the observation is ``z ~ N(m, v + mu)`` with
``mu = sigma_eff_sq / s`` and ``x | z`` is Gaussian, so for the piecewise-linear
MAP estimators every expectation reduces to truncated Gaussian moments.  Only
the MMSE path needs numerical quadrature.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from . import scalar
from .priors import Prior, ScaleDist

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _phi(t):
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(np.isfinite(t), _INV_SQRT_2PI * np.exp(-0.5 * np.square(t)), 0.0)


def _tphi(t):
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(np.isfinite(t), t * _INV_SQRT_2PI * np.exp(-0.5 * np.square(t)), 0.0)


def _interval_prob(lo, hi):
    """``P(lo < Z < hi)`` for standard normal Z, accurate in both tails."""
    return np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def _quad_moment(A, B, lo, hi):
    """``E[(A + B Z)^2 ; lo < Z < hi]`` for standard normal Z."""
    p = _interval_prob(lo, hi)
    d1 = _phi(lo) - _phi(hi)
    d2 = _tphi(lo) - _tphi(hi)
    return A * A * p + 2 * A * B * d1 + B * B * (p + d2)


def _grid(prior: Prior, scale: ScaleDist, sigma_eff_sq: float):
    m = prior.means[:, None]
    v = prior.variances[:, None]
    s = scale.atoms[None, :]
    mu = sigma_eff_sq / s
    tau = np.sqrt(v + mu)
    return m, v, s, mu, tau


def expect(table: np.ndarray, prior: Prior, scale: ScaleDist, weight_by_scale: bool = False) -> float:
    """Collapse a ``(K, J)`` table to ``E[g]`` (or ``E[s g]``)."""
    wj = scale.weights * scale.atoms if weight_by_scale else scale.weights
    return float(prior.weights @ table @ wj)


def map_mse_table(family: str, prior: Prior, scale: ScaleDist, sigma_eff_sq: float, gamma_p: float) -> np.ndarray:
    """``E[|x - xhat|^2 | component, s]`` for a MAP scalar estimator."""
    m, v, s, mu, tau = _grid(prior, scale, sigma_eff_sq)
    lam = gamma_p / s
    gain = v / tau**2
    post_var = v * mu / tau**2
    # error e(z) = a + k z - T(z), written in standardized zeta = (z - m) / tau
    if family == scalar.LINEAR:
        q = 1.0 / (1.0 + lam)
        A = m - q * m
        B = (gain - q) * tau
        return post_var + A * A + B * B
    if family == scalar.LASSO:
        thr = lam
        shift = lam
    elif family == scalar.ZERO_NORM:
        thr = np.sqrt(2.0 * lam)
        shift = 0.0 * lam
    else:
        raise ValueError(f"{family!r} is not a MAP family")
    thr = np.broadcast_to(thr, np.broadcast(m, s).shape)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    lo = (-thr - m) / tau
    hi = (thr - m) / tau
    B_out = (gain - 1.0) * tau
    # z > thr: T = z - shift; z < -thr: T = z + shift; in between T = 0
    up = _quad_moment(m - m + shift, B_out, hi, np.inf)
    down = _quad_moment(-shift + 0.0 * m, B_out, -np.inf, lo)
    mid = _quad_moment(m, gain * tau, lo, hi)
    return post_var + up + down + mid


def exceed_table(prior: Prior, scale: ScaleDist, sigma_eff_sq: float, thresholds) -> np.ndarray:
    """``P(|z| > thr_j | component, s_j)``; ``thresholds`` broadcasts over atoms."""
    m, v, s, mu, tau = _grid(prior, scale, sigma_eff_sq)
    thr = np.broadcast_to(np.asarray(thresholds, dtype=float), s.shape)
    return ndtr((m - thr) / tau) + ndtr((-thr - m) / tau)


def map_threshold_per_atom(family: str, scale: ScaleDist, gamma_p: float) -> np.ndarray:
    return np.asarray(scalar.map_threshold(family, gamma_p / scale.atoms), dtype=float)


def map_variance_term(family: str, prior: Prior, scale: ScaleDist, sigma_eff_sq: float, gamma_p: float) -> float:
    """``E[s sigma^2(z, gamma_p / s)]``, the second fixed-point expectation."""
    s = scale.atoms
    if family == scalar.LINEAR:
        return float(scale.weights @ (s * gamma_p / (s + gamma_p)))
    if not np.isfinite(gamma_p):
        return 0.0
    thr = map_threshold_per_atom(family, scale, gamma_p)
    p = prior.weights @ exceed_table(prior, scale, sigma_eff_sq, thr)
    return float(gamma_p * (scale.weights @ p))


def active_probability(family: str, prior: Prior, scale: ScaleDist, sigma_eff_sq: float, gamma_p: float) -> float:
    """``P(|z| > threshold)`` averaged over x and s (1 for linear)."""
    if family == scalar.LINEAR:
        return 1.0
    if not np.isfinite(gamma_p):
        return 0.0
    thr = map_threshold_per_atom(family, scale, gamma_p)
    return expect(exceed_table(prior, scale, sigma_eff_sq, thr), prior, scale)


def hermite_rule(n: int):
    """Nodes and weights for ``E[g(Z)]``, ``Z ~ N(0, 1)``."""
    x, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def mmse_mse_table(
    true_prior: Prior,
    post_prior: Prior,
    scale: ScaleDist,
    sigma_eff_sq: float,
    sigma_p_eff_sq: float,
    points_per_sd: int = 24,
    postulated_channel: bool = False,
) -> np.ndarray:
    """``E[mse(post, post_or_true, mu_p, mu, z) | component, s]``.

    With ``postulated_channel`` False this is the first MMSE fixed-point
    expectation (estimation error under the true posterior).  With it True the
    error is measured under the postulated posterior, while ``z`` is still
    drawn from the true channel.

    The z-integral uses the trapezoid rule on a uniform grid whose spacing is
    ``1 / points_per_sd`` of the narrowest component spread.  Spike-and-slab
    posteriors switch over a z-width of order ``sqrt(mu)``, far narrower than
    the slab, which defeats low-order Gauss-Hermite rules; the uniform rule
    converges exponentially for these analytic integrands.
    """
    m, v, s, mu, tau = _grid(true_prior, scale, sigma_eff_sq)
    K, J = tau.shape
    out = np.empty((K, J))
    for j in range(J):
        tj = tau[:, j]
        h = tj.min() / points_per_sd
        lo = np.min(m[:, 0] - 12 * tj)
        hi = np.max(m[:, 0] + 12 * tj)
        z = np.arange(lo, hi + h, h)
        dens = _phi((z[None, :] - m) / tj[:, None]) / tj[:, None]  # (K, N)
        mu_t = sigma_eff_sq / scale.atoms[j]
        mu_p = sigma_p_eff_sq / scale.atoms[j]
        est_mean, est_var = scalar.posterior_moments(post_prior, z, mu_p)
        if postulated_channel:
            vals = est_var
        else:
            mean0, var0 = scalar.posterior_moments(true_prior, z, mu_t)
            vals = var0 + (mean0 - est_mean) ** 2
        out[:, j] = h * (dens @ vals)
    return out


def gh_expect(g, n_hermite: int) -> float:
    """``E[g(V)]`` for ``V ~ N(0, 1)`` with an ``n_hermite``-node Gauss-Hermite rule.

    ``g`` must accept an array of nodes.
    """
    nodes, weights = hermite_rule(n_hermite)
    return float(np.asarray(g(nodes)) @ weights)


def signal_power_table(prior: Prior, scale: ScaleDist) -> np.ndarray:
    """``E[x^2 | component]`` broadcast over atoms (the ``gamma_p -> inf`` MSE)."""
    return np.broadcast_to((prior.means**2 + prior.variances)[:, None], (prior.n_components, scale.n_atoms))
