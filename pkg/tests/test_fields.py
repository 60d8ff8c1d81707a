"""
Tests for vector fields, flows, Sundman scaling and reparametrization.
"""
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.fields import (
    LABEL_T,
    LABEL_TAU,
    IntegratorOptions,
    ScalarField,
    Trajectory,
    VectorField,
    VolumeForm,
    adaptive_quad,
    collinear_factor,
    divergence,
    first_integral_residual,
    integrate_flow,
    lie_bracket,
    orbit_distance,
    reparametrize,
    reparametrize_by,
    scale_field,
    sundman_orbit_check,
    time_map,
)
from src.utils.error_handler import (
    DimensionMismatchError,
    DomainViolationError,
    IntegrationError,
    InvalidInputError,
)

from tests.conftest import ROTATION

TWO_PI = 2.0 * np.pi
TIGHT = IntegratorOptions(rtol=1e-12, atol=1e-13)


def identity_1d():
    return ScalarField(dim=1, func=lambda q: float(q[0]), grad=lambda q: np.ones(1), name="x")


def square_field():
    """x^2 d/dx on R."""
    return VectorField(dim=1, func=lambda q: q ** 2, jacobian=lambda q: np.array([[2.0 * q[0]]]), name="x^2")


def circle_trajectory(angles):
    """Unit circle sampled exactly at the given angles."""
    angles = np.asarray(angles, dtype=float)
    states = np.column_stack([np.cos(angles), np.sin(angles)])
    return Trajectory(LABEL_T, angles, states, np.column_stack([-states[:, 1], states[:, 0]]))


def bump_factor():
    return ScalarField(dim=2, func=lambda q: 1.0 + 0.5 * q[0] ** 2, grad=lambda q: np.array([q[0], 0.0]), name="f")


# ============================================================================
# Sundman scaling
# ============================================================================

class TestScaleField:
    def test_unit_factor_is_identity(self, rotation, annulus):
        scaled = scale_field(rotation, ScalarField.constant(1.0, 2))
        for q in annulus[:10]:
            assert_allclose(scaled(q), rotation(q), rtol=0, atol=0)

    def test_pointwise_product(self):
        scaled = scale_field(VectorField.constant([1.0]), identity_1d())
        assert scaled([2.0])[0] == pytest.approx(2.0)

    def test_product_rule_jacobian(self, rotation, annulus):
        scaled = scale_field(rotation, bump_factor())
        assert scaled.jacobian is not None
        assert max(scaled.jacobian_error(q) for q in annulus[:20]) < 1e-6

    def test_nonpositive_factor_reports_point(self):
        scaled = scale_field(VectorField.constant([1.0]), identity_1d())
        with pytest.raises(DomainViolationError) as excinfo:
            scaled([-1.0])
        assert "nonpositive" in str(excinfo.value)
        assert excinfo.value.point == [-1.0]

    def test_dimension_mismatch(self, rotation):
        with pytest.raises(DimensionMismatchError):
            scale_field(rotation, identity_1d())


# ============================================================================
# Integration
# ============================================================================

class TestIntegrateFlow:
    def test_constant_field(self):
        traj = integrate_flow(VectorField.constant([1.0]), [0.0], 1.0)
        assert traj.label == LABEL_T
        assert traj.states[-1, 0] == pytest.approx(1.0, abs=1e-12)

    def test_rotation_returns_after_one_period(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], TWO_PI)
        assert np.linalg.norm(traj.states[-1] - [1.0, 0.0]) < 1e-8

    def test_harmonic_half_period(self):
        harmonic = VectorField.linear([[0.0, 1.0], [-1.0, 0.0]])
        traj = integrate_flow(harmonic, [1.0, 0.0], np.pi)
        assert_allclose(traj.states[-1], [-1.0, 0.0], atol=1e-8)

    def test_fixed_step_mode(self, rotation):
        opts = IntegratorOptions(method="fixed", step=0.01)
        traj = integrate_flow(rotation, [1.0, 0.0], TWO_PI, opts)
        assert np.linalg.norm(traj.states[-1] - [1.0, 0.0]) < 1e-7
        assert np.allclose(np.diff(traj.params), traj.params[1] - traj.params[0])

    def test_guard_truncates(self):
        falling = VectorField(dim=1, func=lambda q: np.array([-1.0]), domain_guard=lambda q: q[0] > 0.0)
        traj = integrate_flow(falling, [1.0], 2.0)
        assert traj.truncated
        assert "domain guard" in traj.truncation_reason
        assert traj.states[-1, 0] > 0.0
        assert traj.params[-1] < 1.0 + 1e-9

    def test_guard_hit_while_choosing_first_step(self):
        # the boundary sits closer than any initial step guess
        drift = VectorField(dim=1, func=lambda q: np.ones(1), domain_guard=lambda q: q[0] < 1e-7)
        traj = integrate_flow(drift, [0.0], 1.0)
        assert traj.truncated
        assert "domain guard" in traj.truncation_reason
        assert traj.params[0] == 0.0
        assert np.all(traj.positions[:, 0] < 1e-7)

    def test_initial_point_outside_guard(self):
        guarded = VectorField(dim=1, func=lambda q: np.ones(1), domain_guard=lambda q: q[0] > 0.0)
        with pytest.raises(DomainViolationError):
            integrate_flow(guarded, [-1.0], 1.0)

    def test_step_budget(self, rotation):
        with pytest.raises(IntegrationError) as excinfo:
            integrate_flow(rotation, [1.0, 0.0], 100.0, IntegratorOptions(max_steps=3))
        assert "budget" in str(excinfo.value)

    def test_stats_are_recorded(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 1.0)
        assert traj.stats["steps"] == len(traj) - 1
        assert traj.stats["nfev"] > traj.stats["steps"]

    @pytest.mark.parametrize("kwargs", [
        {"rtol": 0.0},
        {"atol": -1.0},
        {"method": "euler"},
        {"method": "fixed"},
    ])
    def test_invalid_options(self, kwargs):
        with pytest.raises(InvalidInputError):
            IntegratorOptions(**kwargs)


class TestTrajectory:
    def test_dense_output_reproduces_nodes(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 3.0)
        assert np.array_equal(traj.at(traj.params[3]), traj.states[3])
        assert np.array_equal(traj.at(traj.params[:5]), traj.states[:5])

    def test_dense_output_between_nodes(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 3.0)
        s = 0.5 * (traj.params[2] + traj.params[3])
        assert_allclose(traj.at(s), [np.cos(s), np.sin(s)], atol=1e-6)

    def test_params_must_increase(self):
        with pytest.raises(InvalidInputError):
            Trajectory(LABEL_T, [0.0, 1.0, 1.0], np.zeros((3, 1)), np.zeros((3, 1)))

    def test_unknown_label(self):
        with pytest.raises(InvalidInputError):
            Trajectory("u", [0.0, 1.0], np.zeros((2, 1)), np.zeros((2, 1)))

    def test_outside_span(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 1.0)
        with pytest.raises(InvalidInputError):
            traj.at(1.5)


# ============================================================================
# Time maps and reparametrization
# ============================================================================

class TestQuadrature:
    def test_smooth_integrand_is_clean(self):
        value, error, message = adaptive_quad(np.cos, 0.0, 1.0, 1e-12)
        assert value == pytest.approx(np.sin(1.0), abs=1e-12)
        assert error < 1e-12
        assert message == ""

    def test_poor_estimate_is_reported_not_warned(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            _, error, message = adaptive_quad(lambda x: np.sin(1.0 / x), 1e-4, 1.0, 1e-12)
        assert message
        assert error > 0.0


class TestTimeMap:
    def test_unit_factor(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 3.0)
        tmap = time_map(traj, ScalarField.constant(1.0, 2))
        assert tmap.target[0] == 0.0
        assert_allclose(tmap.target, traj.params, atol=1e-12)

    def test_constant_factor(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 3.0)
        tmap = time_map(traj, ScalarField.constant(2.0, 2))
        assert_allclose(tmap.target, traj.params / 2.0, atol=1e-12)
        assert tmap.inverse(tmap.target[-1]) == pytest.approx(3.0)

    def test_nonpositive_factor(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 3.0)
        f = ScalarField(dim=2, func=lambda q: float(q[0]))
        with pytest.raises(DomainViolationError):
            time_map(traj, f)


class TestReparametrize:
    def test_exponential_flow(self):
        """x(t) = e^t with f = x gives tau = 1 - e^-t and x = 1/(1 - tau)."""
        traj = integrate_flow(VectorField.linear([[1.0]]), [1.0], 1.0)
        rescaled = reparametrize(traj, identity_1d())
        tau = rescaled.params
        assert rescaled.label == LABEL_TAU
        assert_allclose(tau, 1.0 - np.exp(-traj.params), atol=1e-9)
        assert_allclose(rescaled.states[:, 0], 1.0 / (1.0 - tau), rtol=1e-8)
        # d x / d tau = f X = x^2
        assert_allclose(rescaled.derivatives[:, 0], rescaled.states[:, 0] ** 2, rtol=1e-9)

    def test_unit_factor_keeps_curve(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 2.0)
        rescaled = reparametrize(traj, ScalarField.constant(1.0, 2))
        assert np.array_equal(rescaled.states, traj.states)
        assert_allclose(rescaled.params, traj.params, atol=1e-12)

    def test_round_trip(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], TWO_PI, TIGHT)
        f = bump_factor()
        there = reparametrize(traj, f, tol=TIGHT.atol)
        back = reparametrize(there, f.reciprocal(), label=LABEL_T, tol=TIGHT.atol)
        assert np.max(np.abs(back.params - traj.params)) < 2e-9

    def test_constant_rate(self):
        traj = integrate_flow(VectorField.constant([1.0, 0.0]), [0.0, 0.0], 1.0)
        retimed = reparametrize_by(traj, lambda s: 2.0, rate_slope=lambda s: 0.0)
        assert_allclose(retimed.params, traj.params / 2.0, atol=1e-12)
        assert_allclose(retimed.derivatives, 2.0 * traj.derivatives)
        assert np.all(retimed.aux["lambda"] == 0.0)

    def test_nonpositive_rate(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 2.0)
        with pytest.raises(DomainViolationError):
            reparametrize_by(traj, lambda s: 1.0 - s)


# ============================================================================
# Orbit comparison
# ============================================================================

class TestOrbitDistance:
    def test_same_curve(self, rotation):
        traj = integrate_flow(rotation, [1.0, 0.0], 2.0)
        assert orbit_distance(traj, traj) == 0.0

    def test_double_speed_rotation(self, rotation):
        slow = integrate_flow(rotation, [1.0, 0.0], TWO_PI)
        fast = integrate_flow(VectorField.linear(2.0 * ROTATION), [1.0, 0.0], np.pi)
        assert orbit_distance(slow, fast) <= 1e-8

    def test_concentric_circles(self, rotation):
        inner = integrate_flow(rotation, [1.0, 0.0], TWO_PI)
        outer = integrate_flow(rotation, [2.0, 0.0], TWO_PI)
        assert orbit_distance(inner, outer) == pytest.approx(1.0, abs=1e-6)
        assert orbit_distance(outer, inner) == orbit_distance(inner, outer)

    def test_circle_sampled_on_different_nodes(self):
        coarse = circle_trajectory(np.linspace(0.0, TWO_PI, 201))
        u = np.linspace(0.0, 1.0, 231)
        uneven = circle_trajectory(TWO_PI * (u + 0.04 * np.sin(TWO_PI * u)))
        assert orbit_distance(coarse, uneven) <= 1e-6
        assert orbit_distance(uneven, coarse) <= 1e-6

    def test_closed_orbit_seam(self):
        # one curve ends just past the start of the other
        full = circle_trajectory(np.linspace(0.0, TWO_PI, 120))
        overshoot = circle_trajectory(np.linspace(0.0, TWO_PI + 1e-3, 97))
        assert orbit_distance(full, overshoot) <= 1e-6

    def test_dimension_mismatch(self, rotation):
        planar = integrate_flow(rotation, [1.0, 0.0], 1.0)
        line = integrate_flow(VectorField.constant([1.0]), [0.0], 1.0)
        with pytest.raises(DimensionMismatchError):
            orbit_distance(planar, line)


class TestSundmanOrbitCheck:
    def test_rotation_with_bump_factor(self, rotation, radius_squared):
        report = sundman_orbit_check(rotation, bump_factor(), [1.0, 0.0], TWO_PI, TIGHT, first_integral=radius_squared)
        assert report.distance <= 1e-8
        assert report.first_integral_drift <= 1e-7
        assert report.round_trip_error <= 2e-9
        assert report.rescaled.label == LABEL_TAU
        # f >= 1 on the unit circle, so tau runs slower than t
        assert report.tau_end < TWO_PI


# ============================================================================
# Brackets, divergence, first integrals
# ============================================================================

class TestLieBracket:
    def test_self_bracket_vanishes(self, rotation):
        assert_allclose(lie_bracket(rotation, rotation, [0.3, -1.2]), 0.0, atol=1e-15)

    def test_dilation_with_square_field(self):
        dilation = VectorField.linear([[1.0]])
        assert lie_bracket(dilation, square_field(), [2.0])[0] == pytest.approx(4.0)

    def test_dilation_with_constant_field(self):
        dilation = VectorField.linear([[1.0]])
        assert lie_bracket(dilation, VectorField.constant([3.0]), [1.7])[0] == pytest.approx(-3.0)

    def test_antisymmetric_with_finite_differences(self, rotation, annulus):
        cubic = VectorField(dim=2, func=lambda q: np.array([q[0] ** 3, q[0] * q[1]]))
        for q in annulus[:10]:
            assert_allclose(lie_bracket(rotation, cubic, q), -lie_bracket(cubic, rotation, q), atol=1e-12)

    def test_bilinear(self, rotation, annulus):
        cubic = VectorField(dim=2, func=lambda q: np.array([q[0] ** 3, q[0] * q[1]]))
        doubled = VectorField(dim=2, func=lambda q: 2.0 * cubic(q))
        q = annulus[0]
        assert_allclose(lie_bracket(rotation, doubled, q), 2.0 * lie_bracket(rotation, cubic, q), atol=1e-8)


class TestDivergence:
    def test_dilation(self):
        assert divergence(VectorField.linear(np.eye(2)), VolumeForm.euclidean(2), [0.4, 1.1]) == pytest.approx(2.0)

    def test_rotation_is_divergence_free(self, rotation):
        assert divergence(rotation, VolumeForm.euclidean(2), [0.4, 1.1]) == pytest.approx(0.0, abs=1e-15)

    def test_jacobi_multiplier(self):
        """f = 1/x^2 turns x^2 d/dx into d/dx."""
        f = ScalarField(dim=1, func=lambda q: 1.0 / q[0] ** 2, grad=lambda q: np.array([-2.0 / q[0] ** 3]))
        scaled = scale_field(square_field(), f)
        for x in (0.5, 1.0, 3.0):
            assert divergence(scaled, VolumeForm.euclidean(1), [x]) == pytest.approx(0.0, abs=1e-12)

    def test_weighted_density(self):
        rho = ScalarField(dim=1, func=lambda q: float(q[0] ** 2), grad=lambda q: 2.0 * q)
        omega = VolumeForm(dim=1, density=rho)
        assert divergence(VectorField.linear([[1.0]]), omega, [1.0]) == pytest.approx(3.0)


class TestFirstIntegralResidual:
    def test_rotation_invariant(self, rotation, radius_squared, annulus):
        assert first_integral_residual(radius_squared, rotation, annulus) == pytest.approx(0.0, abs=1e-14)

    def test_shared_by_scaled_field(self, rotation, radius_squared, annulus):
        scaled = scale_field(rotation, bump_factor())
        assert first_integral_residual(radius_squared, scaled, annulus) <= 1e-8

    def test_not_an_integral(self):
        F = ScalarField(dim=1, func=lambda q: float(q[0]), grad=lambda q: np.ones(1))
        assert first_integral_residual(F, VectorField.constant([1.0]), [[0.0], [2.0]]) == pytest.approx(1.0)


class TestCollinearFactor:
    def test_exact_multiple(self, rotation, annulus):
        estimate = collinear_factor(lambda q: 3.0 * rotation(q), rotation, annulus)
        assert estimate.constant() == pytest.approx(3.0)
        assert estimate.residual < 1e-14

    def test_vanishing_samples_are_skipped(self):
        dilation = VectorField.linear([[1.0]])
        estimate = collinear_factor(lambda q: dilation(q), dilation, [[0.0], [1.0], [2.0]])
        assert estimate.skipped == (0,)
        assert len(estimate.values) == 2
