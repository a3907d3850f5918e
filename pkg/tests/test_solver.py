import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from replicamap import channel, metrics, priors, scalar, solver
from replicamap.solver import NoiseLevels, ProblemConfig, QuadratureSpec

GAUSS = priors.gaussian(1.0)
ONE = priors.constant_scale(1.0)


def tse_hanly_root(beta, s0):
    # independent oracle: bracketing root of sig - s0 - beta sig / (1 + sig)
    from scipy.optimize import brentq

    return brentq(lambda x: x - s0 - beta * x / (1 + x), s0, s0 + beta + 1, xtol=1e-15, rtol=1e-15)


def linear_cfg(beta, s0):
    return ProblemConfig(beta, s0, GAUSS, ONE, scalar.linear(s0))


def test_linear_example_value():
    sols = solver.solve_map_fixed_point(linear_cfg(1.0, 0.1))
    assert len(sols) == 1
    expected = (0.1 + math.sqrt(0.41)) / 2
    assert sols[0].sigma_eff_sq == pytest.approx(expected, rel=1e-9)
    assert sols[0].gamma_p == pytest.approx(expected, rel=1e-9)
    assert solver.multiuser_efficiency(sols[0], 0.1) == pytest.approx(0.27016, abs=5e-6)


@pytest.mark.parametrize("s0", [0.01, 0.1, 1.0])
def test_linear_monotone_in_beta(s0):
    prev = 0.0
    for beta in (0, 0.5, 1, 2, 3):
        sig = solver.solve_map_fixed_point(linear_cfg(beta, s0))[0].sigma_eff_sq
        assert sig == pytest.approx(tse_hanly_root(beta, s0), rel=1e-9)
        assert sig == pytest.approx(solver.linear_closed_form(beta, s0), rel=1e-9)
        assert sig >= prev
        prev = sig


def test_beta_zero_returns_noise_and_gamma(bg):
    for est in (scalar.lasso(0.3), scalar.zero_norm(0.3), scalar.linear(0.3)):
        cfg = ProblemConfig(0.0, 0.05, bg, ONE, est)
        assert solver.map_rhs(cfg, NoiseLevels(1.0, 2.0)) == (0.05, 0.3)
        (lv,) = solver.solve_map_fixed_point(cfg)
        assert (lv.sigma_eff_sq, lv.gamma_p) == (0.05, 0.3)
        assert solver.multiuser_efficiency(lv, 0.05) == 1.0
    cfg = ProblemConfig(0.0, 0.05, bg, ONE, scalar.mmse())
    (lv,) = solver.solve_mmse_fixed_point(cfg, 0.07)
    assert (lv.sigma_eff_sq, lv.gamma_p) == (0.05, 0.07)


def test_linear_rhs_matches_tse_hanly_form():
    cfg = linear_cfg(1.5, 0.1)
    lv = solver.solve_map_fixed_point(cfg)[0]
    a, b = solver.map_rhs(cfg, lv)
    sig = lv.sigma_eff_sq
    assert a == pytest.approx(0.1 + 1.5 * sig / (1 + sig), rel=1e-10)
    assert b == pytest.approx(a, rel=1e-10)


def test_matched_gaussian_mmse_equals_linear_map():
    for s0 in (0.01, 0.1, 1.0):
        for beta in (0.25, 1.0, 3.0):
            a = solver.solve_map_fixed_point(linear_cfg(beta, s0))[0]
            b = solver.solve_mmse_fixed_point(ProblemConfig(beta, s0, GAUSS, ONE, scalar.mmse()))[0]
            assert b.sigma_eff_sq == pytest.approx(a.sigma_eff_sq, rel=1e-9)
            assert b.gamma_p == b.sigma_eff_sq


def _scalar_mc(prior, scale, sig, gp, family, n, seed):
    rng = np.random.default_rng(seed)
    x = priors.sample(prior, rng, n)
    _, s = scale.sample(rng, n)
    z = x + np.sqrt(sig / s) * rng.standard_normal(n)
    lam = gp / s
    xhat = scalar.scalar_map(family, z, lam)
    var = scalar.scalar_map_variance(family, z, lam)
    return s * (x - xhat) ** 2, s * var


@pytest.mark.parametrize(
    "prior,scale",
    [
        (priors.discrete([0.0], [1.0]), priors.discrete_scale([0.5, 2.0], [0.5, 0.5])),
        (priors.bernoulli_gaussian(0.1), ONE),
        (priors.three_point(0.2), priors.uniform_db(10.0, 4)),
    ],
)
@pytest.mark.parametrize("family", [scalar.LASSO, scalar.ZERO_NORM])
def test_map_rhs_against_scalar_monte_carlo(prior, scale, family):
    beta, s0, gamma = 0.5, 0.1, 0.2
    sig, gp = 0.3, 0.25
    cfg = ProblemConfig(beta, s0, prior, scale, scalar.EstimatorSpec(family, gamma))
    a, b = solver.map_rhs(cfg, NoiseLevels(sig, gp))
    e, v = _scalar_mc(prior, scale, sig, gp, family, 10**7, 99)
    n = e.size
    assert abs(a - (s0 + beta * e.mean())) < 4 * beta * e.std() / math.sqrt(n)
    assert abs(b - (gamma + beta * v.mean())) < 4 * beta * v.std() / math.sqrt(n) + 1e-15


def _mixture_density(prior, s, sig, z):
    tot = prior.variances[:, None] + sig / s
    d = np.exp(-((z[None, :] - prior.means[:, None]) ** 2) / (2 * tot)) / np.sqrt(2 * np.pi * tot)
    return prior.weights @ d


@pytest.mark.parametrize("prior", [priors.bernoulli_gaussian(0.1), priors.three_point(0.1)])
def test_variance_term_q_function_matches_grid(prior):
    scale = priors.uniform_db(10.0, 5)
    sig, gp = 0.2, 0.3
    q_path = channel.map_variance_term(scalar.LASSO, prior, scale, sig, gp)
    total = 0.0
    for w, s in zip(scale.weights, scale.atoms):
        lam = gp / s
        L = 30.0
        zr = np.linspace(lam, L, 200_001)
        tail = trapezoid(_mixture_density(prior, s, sig, zr), zr)
        zl = np.linspace(-L, -lam, 200_001)
        tail += trapezoid(_mixture_density(prior, s, sig, zl), zl)
        total += w * s * lam * tail
    assert q_path == pytest.approx(total, abs=1e-6)


def test_gamma_to_infinity_limit(bg):
    scale = priors.uniform_db(10.0, 6)
    cfg = ProblemConfig(2.0, 0.1, bg, scale, scalar.lasso(1e14))
    a, _ = solver.map_rhs(cfg, NoiseLevels(0.3, 1e14))
    assert a == pytest.approx(0.1 + 2.0 * scale.mean() * priors.second_moment(bg), abs=1e-8)
    lv = solver.solve_map_fixed_point(cfg)[0]
    assert lv.sigma_eff_sq == pytest.approx(0.1 + 2.0 * 0.1, abs=1e-8)


@settings(max_examples=15, deadline=None)
@given(
    st.sampled_from(scalar.MAP_FAMILIES),
    st.floats(0.1, 3.0),
    st.floats(0.01, 0.5),
    st.floats(0.05, 2.0),
    st.floats(0.05, 0.5),
)
def test_returned_levels_are_fixed_points(family, beta, s0, gamma, rho):
    cfg = ProblemConfig(beta, s0, priors.bernoulli_gaussian(rho), ONE, scalar.EstimatorSpec(family, gamma))
    try:
        sols = solver.solve_map_fixed_point(cfg)
    except solver.SolverError:
        return  # no convergent start is a legitimate outcome (e.g. beta P >= 1)
    sigs = [s.sigma_eff_sq for s in sols]
    assert sigs == sorted(sigs)
    for lv in sols:
        assert lv.converged and lv.residual < 1e-10
        a, b = solver.map_rhs(cfg, lv)
        assert abs(a - lv.sigma_eff_sq) <= 1e-9 * lv.sigma_eff_sq
        assert abs(b - lv.gamma_p) <= 1e-9 * lv.gamma_p
        assert lv.sigma_eff_sq >= s0


def test_mmse_fixed_point_residual_and_ordering(bg):
    cfg = ProblemConfig(1.0, 0.01, bg, ONE, scalar.mmse())
    (lv,) = solver.solve_mmse_fixed_point(cfg)
    a, _ = solver.mmse_rhs(cfg, NoiseLevels(lv.sigma_eff_sq, lv.sigma_eff_sq))
    assert abs(a - lv.sigma_eff_sq) <= 1e-9 * lv.sigma_eff_sq
    reg = solver.optimize_regularization(ProblemConfig(1.0, 0.01, bg, ONE, scalar.lasso()))
    assert lv.sigma_eff_sq < reg.levels.sigma_eff_sq


def test_mismatched_mmse_solves(bg):
    post = priors.bernoulli_gaussian(0.2)
    cfg = ProblemConfig(1.0, 0.01, bg, ONE, scalar.mmse(post, 0.02))
    sols = solver.solve_mmse_fixed_point(cfg)
    for lv in sols:
        a, b = solver.mmse_rhs(cfg, lv)
        assert abs(a - lv.sigma_eff_sq) <= 1e-9 * lv.sigma_eff_sq
        assert abs(b - lv.gamma_p) <= 1e-9 * lv.gamma_p


def test_optimize_point_mass_reports_boundary():
    zero = priors.discrete([0.0], [1.0])
    cfg = ProblemConfig(1.0, 0.1, zero, ONE, scalar.lasso())
    reg = solver.optimize_regularization(cfg)
    assert reg.at_boundary and math.isinf(reg.gamma)
    sig = reg.levels.sigma_eff_sq
    for gp in np.geomspace(1e-3, 1e3, 100):
        mse = channel.expect(channel.map_mse_table(scalar.LASSO, zero, ONE, sig, gp), zero, ONE, True)
        assert 0.1 + mse >= sig


@pytest.mark.parametrize("family", [scalar.LASSO, scalar.ZERO_NORM])
def test_optimal_gamma_is_locally_optimal(bg, family):
    cfg = ProblemConfig(0.5, 0.01, bg, ONE, scalar.EstimatorSpec(family))
    pred = metrics.predict(cfg)
    assert pred.levels.converged
    for factor in (0.5, 2.0):
        other = metrics.predict(cfg.with_gamma(pred.gamma * factor))
        assert pred.mse < other.mse


def test_optimal_gamma_feasible(bg):
    for beta in (0.5, 1.0, 2.0, 3.0):
        cfg = ProblemConfig(beta, 0.01, bg, ONE, scalar.lasso())
        reg = solver.optimize_regularization(cfg)
        p = channel.active_probability(scalar.LASSO, bg, ONE, reg.levels.sigma_eff_sq, reg.levels.gamma_p)
        assert beta * p < 1
        assert reg.gamma == pytest.approx(reg.levels.gamma_p * (1 - beta * p), rel=1e-12)
        assert reg.levels.residual < 1e-8


def test_infeasible_regularization(bg):
    cfg = ProblemConfig(1e40, 0.01, bg, ONE, scalar.lasso())
    with pytest.raises(solver.InfeasibleRegularization, match="no feasible regularization"):
        solver.optimize_regularization(cfg)


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(n_hermite=60)
    with pytest.raises(ValueError):
        QuadratureSpec(damping=0.0)
    with pytest.raises(ValueError):
        QuadratureSpec(tol=0.0)


def test_hermite_rule_exact_for_polynomials():
    for n in (31, 61):
        assert channel.gh_expect(lambda v: v**4, n) == pytest.approx(3.0, rel=1e-12)
        assert channel.gh_expect(lambda v: v**2, n) == pytest.approx(1.0, rel=1e-12)


def test_map_mse_table_against_hermite_for_linear(bg):
    # the linear error is polynomial in v, so a Gauss-Hermite rule is exact per point-mass atom
    prior = priors.three_point(0.2)
    sig, gp = 0.3, 0.4
    table = channel.map_mse_table(scalar.LINEAR, prior, ONE, sig, gp)
    for k, x in enumerate(prior.means):
        val = channel.gh_expect(lambda v: (x - (x + math.sqrt(sig) * v) / (1 + gp)) ** 2, 31)
        assert table[k, 0] == pytest.approx(val, rel=1e-12)


def test_problem_config_validation(bg):
    with pytest.raises(ValueError):
        ProblemConfig(-1.0, 0.1, bg, ONE, scalar.lasso(1.0))
    with pytest.raises(ValueError):
        ProblemConfig(1.0, 0.0, bg, ONE, scalar.lasso(1.0))
    with pytest.raises(ValueError):
        solver.solve_map_fixed_point(ProblemConfig(1.0, 0.1, bg, ONE, scalar.lasso()))
