"""Scalar equivalent-channel estimators.

The channel is ``z = x + sqrt(mu) v`` with ``v ~ N(0, 1)``.  MAP estimators
minimise ``F(x, z, lam) = |z - x|^2 / (2 lam) + f(x)`` for one of three cost
functions; the MMSE estimator is the posterior mean under a mixture prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .priors import Prior

LINEAR = "linear"
LASSO = "lasso"
ZERO_NORM = "zero_norm"
MMSE = "mmse"
MAP_FAMILIES = (LINEAR, LASSO, ZERO_NORM)
FAMILIES = MAP_FAMILIES + (MMSE,)


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator family plus its regularisation.

    ``gamma`` may be None for lasso/zero-norm when it is to be chosen by
    :func:`replicamap.solver.optimize_regularization`.  For ``mmse`` the
    postulated prior and noise level default to the true ones (matched case).
    """

    family: str
    gamma: Optional[float] = None
    postulated_prior: Optional[Prior] = None
    postulated_noise: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown estimator family {self.family!r}")
        if self.gamma is not None:
            if not self.gamma > 0:
                raise ValueError("gamma must be > 0")
            object.__setattr__(self, "gamma", float(self.gamma))
        if self.family == MMSE and self.postulated_noise is not None and not self.postulated_noise > 0:
            raise ValueError("postulated noise must be > 0")

    @property
    def is_map(self) -> bool:
        return self.family in MAP_FAMILIES

    def with_gamma(self, gamma: float) -> "EstimatorSpec":
        return EstimatorSpec(self.family, gamma, self.postulated_prior, self.postulated_noise)


def linear(gamma: float) -> EstimatorSpec:
    return EstimatorSpec(LINEAR, gamma)


def lasso(gamma: Optional[float] = None) -> EstimatorSpec:
    return EstimatorSpec(LASSO, gamma)


def zero_norm(gamma: Optional[float] = None) -> EstimatorSpec:
    return EstimatorSpec(ZERO_NORM, gamma)


def mmse(postulated_prior: Optional[Prior] = None, postulated_noise: Optional[float] = None) -> EstimatorSpec:
    return EstimatorSpec(MMSE, None, postulated_prior, postulated_noise)


@dataclass(frozen=True)
class ScalarChannel:
    """One draw of the equivalent scalar channel at scale ``s``."""

    x: float
    s: float
    mu: float
    lam: float
    z: float

    @classmethod
    def build(cls, x: float, s: float, sigma_eff_sq: float, gamma_p: float, v: float) -> "ScalarChannel":
        if not s > 0:
            raise ValueError("scale must be > 0")
        mu = sigma_eff_sq / s
        return cls(x=x, s=s, mu=mu, lam=gamma_p / s, z=x + np.sqrt(mu) * v)


def soft_threshold(z, lam):
    z = np.asarray(z, dtype=float)
    out = np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
    return out if out.ndim else float(out)


def hard_threshold(z, t):
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) > t, z, 0.0)
    return out if out.ndim else float(out)


def map_threshold(family: str, lam):
    """Dead-zone half-width of the scalar MAP estimator (0 for linear)."""
    if family == LASSO:
        return lam
    if family == ZERO_NORM:
        return np.sqrt(2.0 * np.asarray(lam, dtype=float))
    if family == LINEAR:
        return 0.0 * np.asarray(lam, dtype=float)
    raise ValueError(f"{family!r} is not a MAP family")


def cost(family: str, x):
    """Per-component penalty ``f(x)``."""
    x = np.asarray(x, dtype=float)
    if family == LINEAR:
        return 0.5 * x**2
    if family == LASSO:
        return np.abs(x)
    if family == ZERO_NORM:
        return (x != 0).astype(float)
    raise ValueError(f"{family!r} is not a MAP family")


def objective(family: str, x, z, lam):
    """``F(x, z, lam)``, the scalar MAP objective."""
    x = np.asarray(x, dtype=float)
    return (z - x) ** 2 / (2.0 * lam) + cost(family, x)


def _family(spec) -> str:
    family = spec.family if isinstance(spec, EstimatorSpec) else spec
    if family not in MAP_FAMILIES:
        raise ValueError("scalar_map needs a linear, lasso or zero-norm spec; use scalar_mmse for MMSE")
    return family


def scalar_map(spec, z, lam):
    """Argmin over x of ``F(x, z, lam)``."""
    family = _family(spec)
    if family == LINEAR:
        out = np.asarray(z, dtype=float) / (1.0 + lam)
        return out if out.ndim else float(out)
    if family == LASSO:
        return soft_threshold(z, lam)
    return hard_threshold(z, np.sqrt(2.0 * lam))


def scalar_map_variance(spec, z, lam):
    """Curvature-limit variance ``sigma^2(z, lam)`` of the scalar MAP problem.

    On the threshold boundary the dead-zone branch is taken (returns 0).
    """
    family = _family(spec)
    z = np.asarray(z, dtype=float)
    if family == LINEAR:
        out = np.broadcast_to(lam / (1.0 + lam), np.broadcast(z, lam).shape).astype(float)
    else:
        thr = map_threshold(family, lam)
        out = np.where(np.abs(z) > thr, lam, 0.0) * np.ones_like(z)
    return out if out.ndim else float(out)


def _component_posterior(prior: Prior, z, mu):
    """Log-responsibilities, posterior means and variances per mixture component.

    Shapes are ``z.shape + (K,)``.
    """
    z = np.asarray(z, dtype=float)[..., None]
    mu = np.asarray(mu, dtype=float)[..., None]
    m, v, w = prior.means, prior.variances, prior.weights
    tot = v + mu
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    loglik = logw - 0.5 * np.log(2 * np.pi * tot) - 0.5 * (z - m) ** 2 / tot
    logr = loglik - logsumexp(loglik, axis=-1, keepdims=True)
    gain = v / tot
    pmean = m + gain * (z - m)
    pvar = np.broadcast_to(v * mu / tot, pmean.shape)
    return logr, pmean, pvar


def posterior_moments(prior: Prior, z, mu):
    """Posterior mean and variance of x given ``z = x + sqrt(mu) v``."""
    logr, pmean, pvar = _component_posterior(prior, z, mu)
    r = np.exp(logr)
    mean = np.sum(r * pmean, axis=-1)
    var = np.sum(r * (pvar + (pmean - mean[..., None]) ** 2), axis=-1)
    return mean, var


def scalar_mmse(prior: Prior, z, mu):
    """Posterior mean ``E[x | z]`` under ``prior`` and noise variance ``mu``."""
    if not np.all(np.asarray(mu) > 0):
        raise ValueError("mu must be > 0")
    mean, _ = posterior_moments(prior, z, mu)
    return mean if mean.ndim else float(mean)


def scalar_mmse_mse(true_prior: Prior, post_prior: Prior, mu_true, mu_post, z):
    """Conditional MSE of the postulated posterior mean under the true posterior."""
    if not (np.all(np.asarray(mu_true) > 0) and np.all(np.asarray(mu_post) > 0)):
        raise ValueError("noise levels must be > 0")
    mean0, var0 = posterior_moments(true_prior, z, mu_true)
    if post_prior is true_prior and np.array_equal(mu_post, mu_true):
        out = var0
    else:
        est = scalar_mmse(post_prior, z, mu_post)
        out = var0 + (mean0 - est) ** 2
    out = np.asarray(out)
    return out if out.ndim else float(out)
