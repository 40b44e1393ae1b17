import math

import numpy as np
import pytest

from mvscale.core import AssumptionParams, Ensemble, Taming
from mvscale.errors import ConfigError
from mvscale.models import (
    ELL_REGISTRY,
    CboParams,
    EksParams,
    GaussianProbeSampler,
    LinearClosedForm,
    assumption_probe,
    cbo_bilevel_model,
    cbo_consensus,
    cubic_potential_grad,
    eks_model,
    lookup,
    shifted_quadratic_ell,
    zero_model,
)


def _row(value):
    return np.array([[float(value)]])


# --- bi-level CBO --------------------------------------------------------


def test_cbo_fast_drift_by_hand():
    model = cbo_bilevel_model(CboParams(lambda1=1.0, lambda2=0.0, lambda3=1.0))
    f, _ = model.fast_coefficients(Ensemble.dirac([0.0]), _row(2.0), Ensemble.dirac([0.0]))
    assert f[0, 0] == pytest.approx(-10.0)


def test_cbo_fast_fixed_point_at_consensus():
    y_star = 0.7
    model = cbo_bilevel_model(CboParams(lambda1=1.0, lambda2=1.0, lambda3=0.0))
    nu = Ensemble.dirac([y_star])
    f, g = model.fast_coefficients(Ensemble.dirac([0.0]), _row(y_star), nu)
    assert f[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(g == 0.0)


def test_cbo_slow_coefficients_vanish_at_consensus_point():
    model = cbo_bilevel_model(CboParams())
    mu, nu = Ensemble.dirac([1.3]), Ensemble.dirac([0.4])
    b, sigma = model.slow_coefficients(_row(1.3), mu, _row(0.4), nu)
    assert b[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(sigma == 0.0)


def test_cbo_fast_diffusion_is_cut_off(rng):
    p = CboParams(sigma1=0.5, R0=1.5, n=2, m=2)
    model = cbo_bilevel_model(p)
    y = 20.0 * rng.standard_normal((64, 2))
    _, g = model.fast_coefficients(Ensemble(rng.standard_normal((8, 2))), y, Ensemble(y))
    norms = np.linalg.norm(np.diagonal(g, axis1=1, axis2=2), axis=1)
    assert np.all(norms <= p.sigma1 / math.sqrt(2.0) * p.R0 * (1 + 1e-12))


def test_cbo_consensus_of_diracs():
    model = cbo_bilevel_model(CboParams())
    x_star, y_star = cbo_consensus(model, Ensemble.dirac([2.0]), Ensemble.dirac([1.0]))
    assert x_star[0] == pytest.approx(2.0)
    assert y_star[0] == pytest.approx(1.0)


def test_cbo_consensus_prefers_the_minimiser(rng):
    # ell = |x - 2y|^2 with y* near 1 pulls the slow consensus towards 2
    model = cbo_bilevel_model(CboParams(alpha=200.0, beta=200.0))
    mu = Ensemble(rng.uniform(0.0, 4.0, size=(400, 1)))
    nu = Ensemble(rng.uniform(0.0, 2.0, size=(400, 1)))
    x_star, y_star = cbo_consensus(model, mu, nu)
    assert y_star[0] == pytest.approx(1.0, abs=0.05)
    assert x_star[0] == pytest.approx(2.0 * y_star[0], abs=0.1)


def test_cbo_parameter_validation():
    with pytest.raises(ConfigError, match="2\\*lambda1"):
        CboParams(lambda1=0.4)
    with pytest.raises(ConfigError):
        CboParams(alpha=0.0)
    with pytest.raises(ConfigError):
        CboParams(lambda2=-1.0)


def test_cbo_ldp_needs_confining_potential():
    with pytest.raises(ConfigError, match="lambda3"):
        cbo_bilevel_model(CboParams(lambda3=0.0), ldp=True)
    assert cbo_bilevel_model(CboParams(lambda3=1.0), ldp=True).assumptions.q == 4.0


def test_cbo_assumptions_reflect_potential():
    with_potential = cbo_bilevel_model(CboParams()).assumptions
    assert with_potential.K0_tilde > 0
    assert not with_potential.ldp_issues()
    bare = cbo_bilevel_model(CboParams(lambda3=0.0, grad_phi=lambda y: np.zeros_like(y), potential_order=2.0))
    assert bare.assumptions.ldp_issues()


def test_cubic_potential_gradient():
    np.testing.assert_allclose(cubic_potential_grad(np.array([[1.0, 1.0]])), [[2.0, 2.0]])
    assert shifted_quadratic_ell()(np.array([[2.0]]), np.array([1.0]))[0] == 0.0


# --- ensemble Kalman sampler ---------------------------------------------


def test_eks_dirac_ensembles_reduce_to_plain_drifts():
    model = eks_model(EksParams(1))
    mu, nu = Ensemble.dirac([0.5], 3), Ensemble.dirac([-0.2], 3)
    b, sigma = model.slow_coefficients(_row(4.0), mu, _row(1.5), nu)
    f, g = model.fast_coefficients(mu, _row(1.5), nu)
    assert b[0, 0] == pytest.approx(1.5)
    assert np.all(sigma == 0.0)
    assert f[0, 0] == pytest.approx(-2.0 * 1.5 - 1.5**3)
    assert np.all(g == 0.0)


def test_eks_hand_examples():
    model = eks_model(EksParams(1))
    spread = Ensemble(np.array([[1.0], [-1.0]]))
    b, _ = model.slow_coefficients(_row(3.0), Ensemble.dirac([0.0]), _row(1.0), spread)
    assert b[0, 0] == pytest.approx(-2.0)
    f, _ = model.fast_coefficients(spread, _row(1.0), Ensemble.dirac([0.0]))
    assert f[0, 0] == pytest.approx(-4.0)


def test_eks_diffusions_are_covariance_roots():
    model = eks_model(EksParams(2))
    mu = Ensemble(np.array([[2.0, 0.0], [-2.0, 0.0]]))
    nu = Ensemble(np.array([[0.0, 3.0], [0.0, -3.0]]))
    _, sigma = model.slow_coefficients(np.zeros((1, 2)), mu, np.zeros((1, 2)), nu)
    np.testing.assert_allclose(sigma[0], np.diag([2.0, 3.0]), atol=1e-12)


def test_eks_assumptions_and_default_taming():
    model = eks_model(EksParams(1))
    assert model.assumptions.q == 4.0
    # -2|y|^2 - 2|y|^4 - <Cov(mu) y, y> leaves the declared quartic coercivity intact
    report = assumption_probe(model, GaussianProbeSampler(1, 1), 128, seed=4)
    assert report.violations["fast_dissipativity"] == 0
    assert not report.issues
    assert model.default_taming == Taming.DRIFT_TAMED
    assert model.resolve_taming(None) == Taming.DRIFT_TAMED
    assert model.resolve_taming(Taming.NONE) == Taming.NONE


def test_consensus_models_tame_by_default():
    assert cbo_bilevel_model(CboParams()).default_taming == Taming.DRIFT_TAMED
    assert zero_model().default_taming == Taming.NONE


# --- linear benchmark ----------------------------------------------------


def test_linear_closed_forms(linear_model):
    closed = LinearClosedForm.from_model(linear_model)
    assert closed.invariant_variance == 1.0
    assert closed.averaged_path(1.0, np.array([1.0]))[0] == pytest.approx(math.exp(-1.0))
    # phi = 1 against phi' = -phi leaves a unit residual
    assert closed.rate(lambda t: 1.0, lambda t: 0.0, 1.0) == pytest.approx(0.5)
    assert closed.rate(lambda t: math.exp(-t), lambda t: -math.exp(-t), 1.0) == pytest.approx(0.0, abs=1e-12)


def test_linear_exit_action_limits(linear_model):
    closed = LinearClosedForm.from_model(linear_model)
    assert closed.exit_action(0.5, 50.0) == pytest.approx(0.25)
    assert closed.exit_action(0.5, 0.1) > closed.exit_action(0.5, 1.0)
    times = np.linspace(0.0, 2.0, 201)
    path = closed.exit_deviation(0.5, 1.0, times)
    assert path[0] == 0.0
    assert path[100] == pytest.approx(0.5)
    assert path[-1] == pytest.approx(0.5 * math.exp(-1.0))


def test_linear_closed_forms_only_for_linear(zero):
    with pytest.raises(ConfigError, match="linear"):
        LinearClosedForm.from_model(zero)


def test_zero_model_shapes():
    model = zero_model(2, 3)
    b, sigma = model.slow_coefficients(np.ones((4, 2)), Ensemble.dirac([0, 0]), np.ones((4, 3)), Ensemble.dirac([0, 0, 0]))
    assert b.shape == (4, 2)
    assert sigma.shape == (4, 2, 2)


def test_registry_lookup():
    assert lookup(ELL_REGISTRY, "shifted_quadratic", "ell") is shifted_quadratic_ell
    with pytest.raises(ConfigError, match="unknown ell"):
        lookup(ELL_REGISTRY, "nope", "ell")


# --- assumption probe ----------------------------------------------------


def test_probe_accepts_the_linear_benchmark(linear_model):
    report = assumption_probe(linear_model, GaussianProbeSampler(1, 1), 128, seed=3)
    assert report.violations["fast_dissipativity"] == 0
    assert report.violations["monotonicity"] == 0
    assert report.violations["ellipticity"] == 0
    assert report.fitted["K1"] == pytest.approx(2.0, rel=1e-6)
    # q = 2 cannot certify the large-deviation growth condition
    assert report.issues


def test_probe_flags_anti_dissipative_fast_drift(make_model):
    model = make_model(f=lambda mu, y, nu: y, assumptions=AssumptionParams(K1=1.0))
    report = assumption_probe(model, GaussianProbeSampler(1, 1), 128, seed=3)
    assert not report.ok
    assert report.violations["monotonicity"] > 0
    assert report.violations["fast_dissipativity"] > 0
    assert report.as_dict()["ok"] is False


def test_probe_needs_samples(linear_model):
    with pytest.raises(ConfigError):
        assumption_probe(linear_model, n_samples=2)
