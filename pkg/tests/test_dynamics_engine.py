"""Tests for the dynamics_engine module."""

import numpy as np
import pytest

from wassprox.dynamics_engine import (
    ControlModel,
    RelaxedControl,
    averaged_running_cost,
    averaged_velocity,
    certify_model,
    concat,
    growth_diagnostics,
    payoff_J,
    polynomial_test_functions,
    running_cost_integral,
    solve_continuity,
    trajectory_rows,
    weak_form_residual,
)
from wassprox.measure_core import ParticleMeasure, wasserstein2
from wassprox.models import (
    MODEL_LIBRARY,
    aggregation,
    contraction,
    tracking,
    translation,
    zero_drift,
)
from wassprox.utils.validators import NumericalError, ValidationError


class TestControlModel:
    """Tests for ControlModel validation."""

    def test_rejects_empty_control_set(self):
        """Test that U must be nonempty."""
        with pytest.raises(ValidationError):
            ControlModel(
                name="empty",
                dimension=1,
                horizon=1.0,
                controls=np.zeros((0, 1)),
                drift=lambda t, x, m, u: x,
                running_cost=lambda t, m, u: 0.0,
                terminal_cost=lambda m: 0.0,
            )

    def test_rejects_nonpositive_horizon(self):
        """Test that the horizon must be positive."""
        with pytest.raises(ValidationError):
            translation(horizon=0.0)

    def test_control_label(self):
        """Test the human-readable control label."""
        model = translation(dimension=2)
        assert model.control_label(0) == "0 0"
        assert model.control_count == 9


class TestRelaxedControl:
    """Tests for RelaxedControl and concat."""

    def test_mixture_at_is_right_continuous(self):
        """Test the active mixture at and between breakpoints."""
        xi = RelaxedControl.pure([0.0, 0.5, 1.0], [1, 2], 3)
        np.testing.assert_array_equal(xi.mixture_at(0.25), [0, 1, 0])
        np.testing.assert_array_equal(xi.mixture_at(0.5), [0, 0, 1])
        np.testing.assert_array_equal(xi.mixture_at(1.0), [0, 0, 1])
        assert xi.pure_indices() == [1, 2]

    def test_rejects_bad_mixture(self):
        """Test that each mixture must be a probability vector."""
        with pytest.raises(ValidationError):
            RelaxedControl.constant(0.0, 1.0, [0.5, 0.6, 0.0])

    def test_rejects_unordered_breakpoints(self):
        """Test that breakpoints must increase."""
        with pytest.raises(ValidationError):
            RelaxedControl.pure([0.0, 0.0, 1.0], [0, 0], 3)

    def test_mixed_control_has_no_pure_indices(self):
        """Test that a proper mixture is not reported as pure."""
        xi = RelaxedControl.constant(0.0, 1.0, [0.0, 0.5, 0.5])
        assert xi.pure_indices() is None

    def test_concat(self):
        """Test concatenation at a shared time."""
        first = RelaxedControl.pure([0.0, 0.5], [1], 3)
        second = RelaxedControl.pure([0.5, 1.0], [2], 3)
        joined = concat(first, 0.5, second)
        np.testing.assert_array_equal(joined.breakpoints, [0.0, 0.5, 1.0])
        assert joined.pure_indices() == [1, 2]

    def test_concat_with_empty(self):
        """Test that a zero-length control is the identity of concatenation."""
        first = RelaxedControl.pure([0.0, 1.0], [1], 3)
        assert concat(first, 1.0, RelaxedControl.empty(1.0, 3)) is first

    def test_concat_mismatched_time(self):
        """Test that the pieces must meet at theta."""
        first = RelaxedControl.pure([0.0, 0.5], [1], 3)
        second = RelaxedControl.pure([0.6, 1.0], [2], 3)
        with pytest.raises(ValidationError):
            concat(first, 0.5, second)


class TestSolveContinuity:
    """Tests for solve_continuity function."""

    def test_zero_drift_is_constant(self):
        """Test that particles rest under zero drift."""
        model = zero_drift()
        mu = ParticleMeasure.from_points([-1.0, 0.0, 2.0])
        xi = RelaxedControl.pure([0.0, 1.0], [0], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.1)
        for k in range(traj.times.size):
            np.testing.assert_array_equal(traj.paths[k], mu.points)

    def test_translation_moves_rigidly(self):
        """Test that a constant control translates every particle."""
        model = translation()
        mu = ParticleMeasure.from_points([0.0, 1.0])
        xi = RelaxedControl.pure([0.0, 1.0], [2], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.1)
        np.testing.assert_allclose(traj.final.points[:, 0], [1.0, 2.0])

    def test_breakpoints_are_grid_points(self):
        """Test that control switches land on the time grid."""
        model = translation()
        xi = RelaxedControl.pure([0.0, 0.3, 1.0], [1, 2], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, ParticleMeasure.dirac([0.0]), xi, 0.25)
        assert np.any(np.isclose(traj.times, 0.3))
        assert traj.final.points[0, 0] == pytest.approx(-0.3 + 0.7)

    def test_contraction_matches_exponential(self):
        """Test RK4 accuracy on f = -x."""
        model = contraction()
        xi = RelaxedControl.pure([0.0, 1.0], [0], 1)
        traj = solve_continuity(model, 0.0, 1.0, ParticleMeasure.dirac([2.0]), xi, 0.01)
        assert traj.final.points[0, 0] == pytest.approx(2.0 * np.exp(-1.0), rel=1e-8)

    def test_aggregation_contracts_to_mean(self):
        """Test that the nonlocal term pulls particles toward their mean."""
        model = aggregation(strength=1.0)
        mu = ParticleMeasure.from_points([-1.0, 1.0])
        xi = RelaxedControl.pure([0.0, 1.0], [0], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.01)
        np.testing.assert_allclose(traj.final.points[:, 0], [-np.exp(-1.0), np.exp(-1.0)], rtol=1e-7)

    def test_concatenation_restarts(self):
        """Test that solving under a concatenation equals restarting from m_theta."""
        mu = ParticleMeasure.from_points([-1.0, 0.5, 2.0])
        for model in (aggregation(strength=0.5), tracking()):
            first = RelaxedControl.pure([0.0, 0.4], [1], model.control_count)
            second = RelaxedControl.pure([0.4, 0.7, 1.0], [2, 0], model.control_count)
            joined = concat(first, 0.4, second)
            whole = solve_continuity(model, 0.0, 1.0, mu, joined, 0.05)
            head = solve_continuity(model, 0.0, 0.4, mu, first, 0.05)
            tail = solve_continuity(model, 0.4, 1.0, head.final, second, 0.05)
            np.testing.assert_allclose(whole.final.points, tail.final.points, atol=1e-12)
            np.testing.assert_allclose(whole.times, np.concatenate([head.times, tail.times[1:]]))
            total = running_cost_integral(model, head, first) + running_cost_integral(
                model, tail, second
            )
            assert running_cost_integral(model, whole, joined) == pytest.approx(total, abs=1e-12)

    def test_chattering_approaches_relaxed(self):
        """Test that finer chattering controls track the relaxed trajectory more closely."""
        model = aggregation(strength=1.0)
        mu = ParticleMeasure.from_points([-1.0, 1.0])
        errors = []
        for pairs in (2, 4, 8):
            breakpoints = np.linspace(0.0, 1.0, 2 * pairs + 1)
            chattering = RelaxedControl.pure(breakpoints, [1, 2] * pairs, model.control_count)
            relaxed = RelaxedControl(breakpoints, np.tile([0.0, 0.5, 0.5], (2 * pairs, 1)))
            step = 0.25 / (2 * pairs)
            exact = solve_continuity(model, 0.0, 1.0, mu, relaxed, step)
            approx = solve_continuity(model, 0.0, 1.0, mu, chattering, step)
            np.testing.assert_array_equal(exact.times, approx.times)
            errors.append(
                max(
                    wasserstein2(exact.measure(k), approx.measure(k))[0]
                    for k in range(exact.times.size)
                )
            )
            assert errors[-1] <= 0.5 / pairs + 1e-9
        assert errors[0] > errors[1] > errors[2]
        assert errors[2] <= errors[0] / 3.0

    def test_zero_length_window(self):
        """Test that s = r returns the initial measure only."""
        model = translation()
        mu = ParticleMeasure.dirac([1.0])
        traj = solve_continuity(model, 0.5, 0.5, mu, RelaxedControl.empty(0.5, 3), 0.1)
        assert traj.times.size == 1
        assert traj.final.same_as(mu)

    def test_uncovered_window(self):
        """Test that the control must cover the window."""
        model = translation()
        xi = RelaxedControl.pure([0.0, 0.5], [0], model.control_count)
        with pytest.raises(ValidationError):
            solve_continuity(model, 0.0, 1.0, ParticleMeasure.dirac([0.0]), xi, 0.1)

    def test_dimension_mismatch(self):
        """Test that the measure dimension must match the model."""
        model = translation(dimension=2)
        xi = RelaxedControl.pure([0.0, 1.0], [0], model.control_count)
        with pytest.raises(ValidationError):
            solve_continuity(model, 0.0, 1.0, ParticleMeasure.dirac([0.0]), xi, 0.1)

    def test_blow_up(self):
        """Test that a non-finite state raises NumericalError."""
        model = ControlModel(
            name="blow_up",
            dimension=1,
            horizon=1.0,
            controls=np.zeros((1, 1)),
            drift=lambda t, x, m, u: x**2,
            running_cost=lambda t, m, u: 0.0,
            terminal_cost=lambda m: 0.0,
        )
        xi = RelaxedControl.pure([0.0, 1.0], [0], 1)
        with pytest.raises(NumericalError):
            solve_continuity(model, 0.0, 1.0, ParticleMeasure.dirac([1e200]), xi, 0.5)


class TestWeakFormResidual:
    """Tests for weak_form_residual function."""

    def test_small_for_polynomials(self):
        """Test that the continuity equation holds weakly for low-degree test functions."""
        model = translation()
        mu = ParticleMeasure.from_points([-1.0, 0.5, 2.0])
        xi = RelaxedControl.pure([0.0, 0.4, 1.0], [1, 2], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.01)
        for phi in polynomial_test_functions(1):
            assert weak_form_residual(model, traj, xi, phi) < 1e-8

    def test_whole_model_library(self):
        """Test the residual bound 10 * step^2 for every library model in one and two dimensions."""
        step = 0.01
        rng = np.random.default_rng(4)
        for dimension in (1, 2):
            mu = ParticleMeasure.from_points(rng.uniform(-1.5, 1.5, size=(4, dimension)))
            for name, factory in MODEL_LIBRARY.items():
                model = factory(dimension=dimension)
                count = model.control_count
                xi = RelaxedControl(
                    [0.0, 0.5, 1.0], [np.full(count, 1.0 / count), np.eye(count)[count - 1]]
                )
                traj = solve_continuity(model, 0.0, 1.0, mu, xi, step)
                for phi in polynomial_test_functions(dimension):
                    residual = weak_form_residual(model, traj, xi, phi)
                    assert residual <= 10.0 * step**2, (name, dimension, phi.name, residual)

    def test_library_size(self):
        """Test the number of monomials in two dimensions."""
        assert len(polynomial_test_functions(2)) == 2 + 2 * 2 + 3


class TestPayoff:
    """Tests for payoff_J and running_cost_integral functions."""

    def test_translation_payoff(self):
        """Test the terminal cost after moving a Dirac toward the origin."""
        model = translation()
        xi = RelaxedControl.pure([0.0, 1.0], [1], model.control_count)
        assert payoff_J(model, 0.0, ParticleMeasure.dirac([3.0]), xi, 0.01) == pytest.approx(4.0)

    def test_tracking_running_cost(self):
        """Test the running cost of a resting Dirac."""
        model = tracking(effort=0.5)
        xi = RelaxedControl.pure([0.0, 1.0], [0], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, ParticleMeasure.dirac([2.0]), xi, 0.1)
        assert running_cost_integral(model, traj, xi) == pytest.approx(4.0)
        assert payoff_J(model, 0.0, ParticleMeasure.dirac([2.0]), xi, 0.1) == pytest.approx(8.0)


class TestGrowthDiagnostics:
    """Tests for growth_diagnostics function."""

    def test_translation_constants(self):
        """Test fitted constants of a unit-speed translation."""
        model = translation()
        mu = ParticleMeasure.dirac([0.0])
        xi = RelaxedControl.pure([0.0, 1.0], [2], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.1)
        report = growth_diagnostics(traj, mu)
        assert report.passed
        assert report.c1 == pytest.approx(1.0)
        assert report.c2 == pytest.approx(1.0)

    def test_declared_bound_violation(self):
        """Test that exceeding a declared constant is reported."""
        model = translation()
        mu = ParticleMeasure.dirac([0.0])
        xi = RelaxedControl.pure([0.0, 1.0], [2], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.1)
        report = growth_diagnostics(traj, mu, bounds={"c2": 0.5})
        assert not report.passed
        assert report.violations[0].startswith("c2")


class TestAverages:
    """Tests for averaged_velocity and averaged_running_cost functions."""

    def test_averaged_velocity_of_translation(self):
        """Test that the averaged velocity of f = u is the control."""
        model = translation()
        mu = ParticleMeasure.from_points([0.0, 1.0])
        xi = RelaxedControl.constant(0.0, 1.0, [0.0, 0.25, 0.75])
        field = averaged_velocity(model, 0.0, 0.2, mu, xi)
        np.testing.assert_allclose(field.values[:, 0], 0.5)

    def test_averaged_velocity_converges(self):
        """Test that the averaged velocity of f = -x approaches -y as the window shrinks."""
        model = contraction()
        mu = ParticleMeasure.from_points([1.0, -2.0])
        xi = RelaxedControl.constant(0.0, 1.0, [1.0])
        errors = []
        for h in (0.1, 0.01):
            field = averaged_velocity(model, 0.0, h, mu, xi)
            expected = -mu.points[:, 0] * (1.0 - np.exp(-h)) / h
            np.testing.assert_allclose(field.values[:, 0], expected, atol=1e-5)
            errors.append(float(np.max(np.abs(field.values + mu.points))))
        assert errors[1] <= errors[0] / 5.0
        assert errors[1] <= 0.01 + 1e-6

    def test_averaged_running_cost(self):
        """Test the averaged running cost of a resting Dirac."""
        model = tracking(effort=1.0)
        xi = RelaxedControl.pure([0.0, 1.0], [0], model.control_count)
        cost = averaged_running_cost(model, 0.0, 0.5, ParticleMeasure.dirac([1.0]), xi)
        assert cost == pytest.approx(1.0)


class TestCertifyModel:
    """Tests for certify_model function."""

    def test_library_models_pass(self):
        """Test that the library models respect their declared constants."""
        rng = np.random.default_rng(0)
        for model in (translation(), contraction(), aggregation(strength=0.5)):
            certificate = certify_model(model, rng, samples=50)
            assert certificate.passed, certificate.violations

    def test_understated_constant(self):
        """Test that an understated growth constant is caught."""
        model = ControlModel(
            name="fast",
            dimension=1,
            horizon=1.0,
            controls=np.array([[1.0]]),
            drift=lambda t, x, m, u: 10.0 * np.ones_like(x),
            running_cost=lambda t, m, u: 0.0,
            terminal_cost=lambda m: 0.0,
            c_1=1.0,
        )
        certificate = certify_model(model, np.random.default_rng(1), samples=20)
        assert not certificate.passed


class TestTrajectoryRows:
    """Tests for trajectory_rows function."""

    def test_long_format(self):
        """Test one row per time and particle."""
        model = zero_drift()
        mu = ParticleMeasure.from_points([0.0, 1.0])
        xi = RelaxedControl.pure([0.0, 1.0], [0], model.control_count)
        traj = solve_continuity(model, 0.0, 1.0, mu, xi, 0.5)
        rows = trajectory_rows(traj)
        assert len(rows) == 3 * 2
        assert rows[1] == [0.0, 1, 1.0, 0.5]
