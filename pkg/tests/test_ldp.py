import math

import numpy as np
import pytest

from mvscale.averaging import solve_averaged
from mvscale.core import Ensemble, SimConfig, TimeScales
from mvscale.errors import AdmissibilityError, ConfigError, SingularDiffusionError
from mvscale.frozen import InvariantEnsemble, InvariantSolverConfig
from mvscale.ldp import (
    ControlPath,
    ExitRateEstimate,
    controlled_simulate,
    exit_action_search,
    exit_probability,
    occupation_measure,
    q2_matrix,
    rate_functional,
)
from mvscale.measures import moment
from mvscale.models import EksParams, LinearClosedForm, eks_model, linear_benchmark_model

SLOW_LAW = Ensemble.dirac([0.0])
FAST_INV = InvariantSolverConfig(n_particles=500, tol=0.15, seed=3)


def _inv(points):
    return InvariantEnsemble(Ensemble(np.asarray(points, dtype=float)), SLOW_LAW, True, 0.0, 0.0)


@pytest.fixture(scope="module")
def benchmark():
    return linear_benchmark_model(a=1.0, c=1.0, k=1.0, s=1.0)


@pytest.fixture(scope="module")
def averaged_fine(benchmark):
    return solve_averaged([1.0], benchmark, 1.0, 1e-3, FAST_INV)


@pytest.fixture(scope="module")
def averaged_coarse(benchmark):
    return solve_averaged([1.0], benchmark, 1.0, 0.01, FAST_INV)


# --- Q2 ------------------------------------------------------------------


def test_q2_of_constant_diffusion():
    model = linear_benchmark_model(s=2.0)
    assert q2_matrix(np.array([0.3]), SLOW_LAW, _inv([[1.0], [5.0]]), model)[0, 0] == pytest.approx(4.0)


def test_q2_averages_fast_dependent_diffusion(make_model):
    model = make_model(sigma=lambda x, mu, y, nu: y[:, :, None])
    assert q2_matrix(np.array([0.0]), SLOW_LAW, _inv([[1.0], [-1.0]]), model)[0, 0] == pytest.approx(1.0)
    assert q2_matrix(np.array([0.0]), SLOW_LAW, _inv([[0.0], [2.0]]), model)[0, 0] == pytest.approx(2.0)


# --- rate functional -----------------------------------------------------


def test_rate_vanishes_on_the_averaged_path(benchmark, averaged_coarse):
    result = rate_functional(averaged_coarse.grid, averaged_coarse, benchmark)
    assert result.value <= 1e-8 * (1.0 + np.abs(averaged_coarse.path).max())
    assert not result.infinite


def test_rate_of_constant_path(benchmark, averaged_coarse):
    phi = np.ones((averaged_coarse.times.size, 1))
    exact = rate_functional(phi, averaged_coarse, benchmark, defect_correction=False)
    assert exact.value == pytest.approx(0.5, abs=1e-12)
    corrected = rate_functional(phi, averaged_coarse, benchmark)
    assert corrected.value == pytest.approx(0.5, abs=1e-2)
    np.testing.assert_allclose(exact.condition_numbers, 1.0)


def test_rate_is_infinite_off_the_starting_point(benchmark, averaged_coarse):
    phi = np.full((averaged_coarse.times.size, 1), 2.0)
    result = rate_functional(phi, averaged_coarse, benchmark)
    assert result.infinite
    assert result.integrand.size == 0


def test_rate_matches_closed_form(benchmark, averaged_fine):
    t = averaged_fine.times
    closed = LinearClosedForm.from_model(benchmark)
    for amplitude, freq in ((0.5, 2.0), (0.2, 5.0)):
        phi = averaged_fine.path + (amplitude * np.sin(freq * t))[:, None]
        value = rate_functional(phi, averaged_fine, benchmark).value
        expected = closed.rate(
            lambda s: math.exp(-s) + amplitude * math.sin(freq * s),
            lambda s: -math.exp(-s) + amplitude * freq * math.cos(freq * s),
            1.0,
        )
        assert value == pytest.approx(expected, rel=1e-3)


def test_rate_scales_inversely_with_diffusion_strength(benchmark, averaged_coarse):
    t = averaged_coarse.times
    phi = averaged_coarse.path + (0.3 * np.sin(3.0 * t))[:, None]
    base = rate_functional(phi, averaged_coarse, benchmark).value
    noisier = rate_functional(phi, averaged_coarse, linear_benchmark_model(s=2.0)).value
    assert noisier == pytest.approx(base / 4.0, rel=1e-12)


def test_rate_is_quadratic_in_the_deviation(benchmark, averaged_coarse):
    psi = np.sin(2.0 * averaged_coarse.times)[:, None]
    unit = rate_functional(averaged_coarse.path + psi, averaged_coarse, benchmark).value
    tripled = rate_functional(averaged_coarse.path + 3.0 * psi, averaged_coarse, benchmark).value
    assert tripled / unit == pytest.approx(9.0, rel=1e-6)


def test_rate_quadrature_is_second_order(benchmark):
    closed = LinearClosedForm.from_model(benchmark)
    exact = closed.rate(lambda t: 0.3 * math.sin(3.0 * t), lambda t: 0.9 * math.cos(3.0 * t), 1.0)
    errors = []
    for dt in (0.02, 0.01, 0.005):
        averaged = solve_averaged([1.0], benchmark, 1.0, dt, FAST_INV)
        psi = 0.3 * np.sin(3.0 * averaged.times)[:, None]
        # with the defect removed the residual is psi' + psi whatever the invariant samples are
        errors.append(abs(rate_functional(averaged.path + psi, averaged, benchmark).value - exact))
    assert 3.0 <= errors[0] / errors[1] <= 5.0
    assert 3.0 <= errors[1] / errors[2] <= 5.0


def test_q2_single_evaluation_when_sigma_ignores_fast_state(rng):
    model = eks_model(EksParams(2))
    mu = Ensemble(rng.normal(size=(40, 2)))
    points = rng.normal(size=(60, 2))
    x = np.array([0.4, -0.1])
    single = q2_matrix(x, mu, _inv(points), model)
    averaged = q2_matrix(x, mu, _inv(points), model, force_average=True)
    reordered = q2_matrix(x, mu, _inv(points[rng.permutation(60)]), model)
    np.testing.assert_allclose(averaged, single, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(reordered, single, rtol=1e-12, atol=1e-14)


def test_singular_diffusion_is_rejected(averaged_coarse):
    degenerate = linear_benchmark_model(s=0.0)
    with pytest.raises(SingularDiffusionError, match="elliptic"):
        rate_functional(averaged_coarse.grid, averaged_coarse, degenerate)


def test_rate_path_must_match_grid(benchmark, averaged_coarse):
    with pytest.raises(ConfigError, match="points"):
        rate_functional(np.ones((5, 1)), averaged_coarse, benchmark)


# --- controls ------------------------------------------------------------


def test_control_path_energy_and_interpolation():
    control = ControlPath.constant([3.0, 0.0], 1.0, 0.1, 1, 1)
    assert control.energy == pytest.approx(4.5)
    np.testing.assert_allclose(control.value_at(0.55), [3.0, 0.0])
    np.testing.assert_array_equal(control.value_at(1.5), [0.0, 0.0])
    h1, h2 = control.split(0.2)
    assert h1.shape == (1,) and h2.shape == (1,)
    with pytest.raises(AdmissibilityError, match="exceeds"):
        control.check_admissible(1.0)
    with pytest.raises(ConfigError):
        ControlPath(np.array([0.0, 0.1]), np.ones((3, 2)), 1, 1)


def _controlled_cfg(**overrides):
    base = dict(dt_macro=0.1, horizon=1.0, n_particles=5, seed=3)
    base.update(overrides)
    return SimConfig(**base)


def test_controlled_run_rejects_inadmissible_control(benchmark):
    control = ControlPath.constant([3.0, 0.0], 1.0, 0.1, 1, 1)
    with pytest.raises(AdmissibilityError):
        controlled_simulate(benchmark, TimeScales(0.1, 0.01), control, _controlled_cfg(), [1.0], admissible_bound=1.0)


def test_controlled_run_needs_fast_scale_below_slow(benchmark):
    with pytest.raises(ConfigError, match="delta < epsilon"):
        controlled_simulate(
            benchmark, TimeScales(0.1, 0.5), ControlPath.zero(1.0, 0.1, 1, 1), _controlled_cfg(), [1.0]
        )


def test_zero_control_is_deterministic_and_matches_companion(benchmark):
    ts = TimeScales(0.1, 0.01)
    zero = ControlPath.zero(1.0, 0.1, 1, 1)
    first = controlled_simulate(benchmark, ts, zero, _controlled_cfg(), [1.0])
    again = controlled_simulate(benchmark, ts, zero, _controlled_cfg(), [1.0])
    np.testing.assert_array_equal(first.path.snapshots, again.path.snapshots)
    # independent companion noise by default
    assert not np.array_equal(first.path.snapshots, first.companion.snapshots)

    shared = controlled_simulate(benchmark, ts, zero, _controlled_cfg(), [1.0], share_companion_noise=True)
    np.testing.assert_array_equal(shared.path.snapshots, shared.companion.snapshots)
    np.testing.assert_array_equal(shared.path.fast, shared.companion.fast)


def test_slow_control_shifts_the_mean(benchmark):
    ts = TimeScales(0.05, 0.005)
    cfg = _controlled_cfg(dt_macro=0.05, n_particles=20)
    pushed = controlled_simulate(benchmark, ts, ControlPath.constant([1.0, 0.0], 1.0, 0.05, 1, 1), cfg, [1.0])
    free = controlled_simulate(benchmark, ts, ControlPath.zero(1.0, 0.05, 1, 1), cfg, [1.0])
    # dX gains sigma * h1 dt = dt, so the mean moves by 1 - exp(-1)
    shift = pushed.path.mean_path()[-1, 0] - free.path.mean_path()[-1, 0]
    assert shift == pytest.approx(1.0 - math.exp(-1.0), abs=0.01)


# --- occupation measure --------------------------------------------------


def test_occupation_time_marginal_is_lebesgue(benchmark):
    ts = TimeScales(0.1, 0.01, separation=0.2)
    cfg = _controlled_cfg()
    control = ControlPath.constant([0.5, -0.2], 1.2, 0.1, 1, 1)
    run = controlled_simulate(benchmark, ts, control, cfg, [1.0], tail=0.2)
    record = occupation_measure(run)
    for t in (0.3, 0.5, 1.0):
        assert record.time_mass(t) == pytest.approx(t, abs=2 * cfg.dt_macro)
    assert record.total_mass == pytest.approx(1.0)

    atoms, mass = record.h_marginal()
    np.testing.assert_allclose(atoms, [[0.5, -0.2]])
    np.testing.assert_allclose(mass, [1.0])


def test_occupation_needs_tail_and_aligned_window(benchmark):
    ts = TimeScales(0.1, 0.01, separation=0.3)
    run = controlled_simulate(benchmark, ts, ControlPath.zero(1.0, 0.1, 1, 1), _controlled_cfg(), [1.0])
    with pytest.raises(ConfigError, match="tail"):
        occupation_measure(run)
    with pytest.raises(ConfigError, match="multiple"):
        occupation_measure(run, separation=0.15)
    with pytest.raises(ConfigError):
        occupation_measure(run, separation=0.1, thinning=0)


def test_occupation_fast_marginal_is_frozen_law(benchmark):
    ts = TimeScales(0.1, 1e-3, separation=0.1)
    cfg = _controlled_cfg(dt_macro=0.01, n_particles=50)
    control = ControlPath.zero(1.1, 0.01, 1, 1)
    run = controlled_simulate(benchmark, ts, control, cfg, [1.0], tail=0.1)
    record = occupation_measure(run, thinning=2)
    assert record.y.shape[1] == 25
    late = record.y_marginal(0.5)
    assert moment(late, 2) == pytest.approx(1.0, abs=0.2)
    counts, _ = record.y_histogram(bins=10)
    assert counts.sum() == pytest.approx(record.total_mass)


# --- exit rates ----------------------------------------------------------


def test_exit_rate_estimate():
    assert math.isinf(ExitRateEstimate(0.1, 0.5, 0, 100).rate)
    assert ExitRateEstimate(0.1, 0.5, 5, 100).rate == pytest.approx(-0.1 * math.log(0.05))


def test_exit_probability_validates_radius(benchmark, averaged_coarse):
    cfg = SimConfig(dt_macro=0.01, horizon=1.0, n_particles=2)
    with pytest.raises(ConfigError, match="radius"):
        exit_probability(benchmark, TimeScales(0.1, 0.01), cfg, [1.0], 0.0, averaged_coarse)


def test_exit_action_search_finds_closed_form(benchmark, averaged_coarse):
    best = exit_action_search(averaged_coarse, benchmark, 0.5, n_tau=20)
    assert best.tau == pytest.approx(1.0)
    assert best.closed_form == pytest.approx(0.25 / (1.0 - math.exp(-2.0)))
    assert best.value == pytest.approx(best.closed_form, rel=1e-2)


@pytest.mark.slow
def test_exit_probability_tracks_exit_action():
    # decoupled slow drift: the deviation is an exact OU process, so the action is the quasi-potential
    model = linear_benchmark_model(a=1.0, c=0.0, k=1.0, s=1.0)
    averaged = solve_averaged([1.0], model, 1.0, 0.01, FAST_INV)
    eps, radius = 0.05, 0.5
    cfg = SimConfig(dt_macro=0.01, horizon=1.0, n_particles=1000, n_reps=100, seed=23, n_jobs=4)
    est = exit_probability(model, TimeScales(eps, 5e-4), cfg, [1.0], radius, averaged)
    assert est.hits >= 20
    action = LinearClosedForm.from_model(model).exit_action(radius, 1.0)
    assert abs(est.rate / action - 1.0) <= 0.35


@pytest.mark.slow
def test_controlled_fast_marginal_late_window(benchmark):
    ts = TimeScales(0.05, 1e-3, separation=0.1)
    cfg = SimConfig(dt_macro=0.01, horizon=2.0, n_particles=500, seed=29)
    run = controlled_simulate(benchmark, ts, ControlPath.constant([0.5, 0.0], 2.1, 0.01, 1, 1), cfg, [1.0], tail=0.1)
    record = occupation_measure(run, thinning=5)
    late = record.y_marginal(1.0)
    assert moment(late, 2) == pytest.approx(1.0, abs=0.1)
    assert abs(late.particles.mean()) < 0.1
