"""Scalar source priors and scale-factor distributions.

A :class:`Prior` is a finite Gaussian mixture.  Discrete distributions are the
special case where every component has zero variance, so point masses share the
same integration code as Gaussian slabs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

WEIGHT_TOL = 1e-12


def _check_weights(weights: np.ndarray) -> None:
    if weights.ndim != 1 or weights.size == 0:
        raise ValueError("weights must be a non-empty 1-D sequence")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    total = float(weights.sum())
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights sum to {total!r}, expected 1")


@dataclass(frozen=True, eq=False)
class Prior:
    """Mixture prior ``sum_k w_k N(mean_k, var_k)``.

    ``kind`` is ``"mixture"`` or ``"discrete"``; the latter only records how the
    prior was built (all variances are zero).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    kind: str = "mixture"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        m = np.asarray(self.means, dtype=float).ravel()
        v = np.asarray(self.variances, dtype=float).ravel()
        if not (w.shape == m.shape == v.shape):
            raise ValueError("weights, means and variances must have equal length")
        _check_weights(w)
        if not np.all(np.isfinite(m)):
            raise ValueError("component means must be finite")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("component variances must be finite and nonnegative")
        for name, arr in (("weights", w), ("means", m), ("variances", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, Prior):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.variances, other.variances)
        )

    def __hash__(self):
        return hash((self.weights.tobytes(), self.means.tobytes(), self.variances.tobytes()))

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def zero_mask(self) -> np.ndarray:
        """Components that are exact point masses at zero."""
        return (self.variances == 0) & (self.means == 0)

    @property
    def p_zero(self) -> float:
        return float(self.weights[self.zero_mask].sum())

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def components(self):
        return zip(self.weights, self.means, self.variances)


def gaussian_mixture(components: Sequence[tuple[float, float, float]]) -> Prior:
    """Build a prior from ``(weight, mean, variance)`` triples."""
    arr = np.asarray(components, dtype=float).reshape(-1, 3)
    return Prior(arr[:, 0], arr[:, 1], arr[:, 2], kind="mixture")


def discrete(atoms: Sequence[float], weights: Sequence[float]) -> Prior:
    atoms = np.asarray(atoms, dtype=float)
    return Prior(np.asarray(weights, dtype=float), atoms, np.zeros_like(atoms), kind="discrete")


def gaussian(var: float = 1.0, mean: float = 0.0) -> Prior:
    return gaussian_mixture([(1.0, mean, var)])


def bernoulli_gaussian(rho: float, var: float = 1.0) -> Prior:
    """Spike-and-slab: 0 w.p. ``1 - rho``, N(0, var) w.p. ``rho``."""
    if not 0 <= rho <= 1:
        raise ValueError("rho must lie in [0, 1]")
    return gaussian_mixture([(1.0 - rho, 0.0, 0.0), (rho, 0.0, var)])


def three_point(rho: float) -> Prior:
    """Atoms at 0 and +-1/sqrt(rho) with unit average power."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    a = 1.0 / math.sqrt(rho)
    return discrete([a, -a, 0.0], [rho / 2, rho / 2, 1.0 - rho])


def second_moment(prior: Prior) -> float:
    return float(np.dot(prior.weights, prior.means**2 + prior.variances))


def sample(prior: Prior, rng: np.random.Generator, size=None):
    """Draw from ``prior`` using the caller's generator.

    Returns a float when ``size`` is None, otherwise an array.
    """
    n = 1 if size is None else size
    idx = rng.choice(prior.n_components, size=n, p=prior.weights)
    noise = rng.standard_normal(size=n)
    out = prior.means[idx] + np.sqrt(prior.variances[idx]) * noise
    return float(out[0]) if size is None else out


@dataclass(frozen=True, eq=False)
class ScaleDist:
    """Finite distribution of positive scale factors ``s``."""

    weights: np.ndarray
    atoms: np.ndarray
    kind: str = "discrete"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        a = np.asarray(self.atoms, dtype=float).ravel()
        if w.shape != a.shape:
            raise ValueError("weights and atoms must have equal length")
        _check_weights(w)
        if np.any(a <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("scale atoms must be finite and strictly positive")
        for name, arr in (("weights", w), ("atoms", a)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, ScaleDist):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.atoms, other.atoms)

    def __hash__(self):
        return hash((self.weights.tobytes(), self.atoms.tobytes()))

    @property
    def n_atoms(self) -> int:
        return self.atoms.size

    @property
    def is_constant(self) -> bool:
        return self.atoms.size == 1

    def mean(self) -> float:
        return float(np.dot(self.weights, self.atoms))

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(atom_index, s)`` arrays of length ``size``."""
        if self.is_constant:
            idx = np.zeros(size, dtype=np.int64)
        else:
            idx = rng.choice(self.n_atoms, size=size, p=self.weights)
        return idx, self.atoms[idx]


def constant_scale(s: float = 1.0) -> ScaleDist:
    return ScaleDist([1.0], [s], kind="constant", params={"s": s})


def discrete_scale(atoms: Sequence[float], weights: Sequence[float]) -> ScaleDist:
    return ScaleDist(weights, atoms, kind="discrete")


def uniform_db(range_db: float = 10.0, n_atoms: int = 32) -> ScaleDist:
    """Equally weighted grid, uniform in dB over ``range_db``, rescaled to mean 1.

    Atoms sit at the midpoints of ``n_atoms`` equal dB cells, so the grid
    converges to the continuous log-uniform law as ``n_atoms`` grows.
    """
    if n_atoms < 1 or range_db < 0:
        raise ValueError("need n_atoms >= 1 and range_db >= 0")
    db = (np.arange(n_atoms) + 0.5) / n_atoms * range_db
    atoms = 10.0 ** (db / 10.0)
    atoms = atoms / atoms.mean()
    w = np.full(n_atoms, 1.0 / n_atoms)
    w[-1] = 1.0 - w[:-1].sum()
    return ScaleDist(w, atoms, kind="uniform_db", params={"range_db": range_db, "n_atoms": n_atoms})


def expect_over_scale(dist: ScaleDist, integrand: Callable[[float], float]) -> float:
    """Exact expectation ``E[g(s)]`` as a weighted sum over atoms."""
    return float(sum(w * integrand(float(s)) for w, s in zip(dist.weights, dist.atoms)))


def fold_scale(prior: Prior, scale: ScaleDist) -> Prior:
    """Law of ``sqrt(s) * u`` for ``u ~ prior`` and independent ``s ~ scale``.

    Used when the estimator does not know the power levels: the variation is
    pushed into the prior and a constant unit scale is used instead.
    """
    w = np.outer(prior.weights, scale.weights).ravel()
    m = np.outer(prior.means, np.sqrt(scale.atoms)).ravel()
    v = np.outer(prior.variances, scale.atoms).ravel()
    w = w / w.sum()
    return Prior(w, m, v, kind=prior.kind)
