"""
Tests for metrics, Christoffel symbols, geodesics and the conformal and
pregeodesic diagnostics.
"""
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.fields import (
    IntegratorOptions,
    ScalarField,
    VectorField,
    integrate_flow,
    integrate_sode,
    reparametrize,
    reparametrize_by,
)
from src.core.linstruct import liouville_field
from src.core.riemann import (
    ConformalFactor,
    MetricField,
    arc_length,
    autoparallel_residual,
    christoffel,
    conformal_christoffel,
    conformal_nabla_residual,
    conformal_rescale,
    covariant_derivative,
    fitted_lambda,
    geodesic_field,
    geodesic_rescaling,
    geodesic_residual,
    gradient,
    killing_residual,
    kinetic_energy,
    metric_compatibility_residual,
    pregeodesic_factor,
    reparametrized_geodesic_residual,
    speed_drift,
    torsion_residual,
)
from src.core.sampling import box_samples
from src.utils.error_handler import CertificationError, DomainViolationError, InvalidInputError

QUARTER = np.pi / 4


def sine_phi():
    return ConformalFactor(ScalarField(
        dim=2,
        func=lambda q: 0.3 * np.sin(q[0]),
        grad=lambda q: np.array([0.3 * np.cos(q[0]), 0.0]),
        name="phi",
    ))


def linear_phi():
    """phi = x on the Euclidean plane."""
    return ConformalFactor(ScalarField(dim=2, func=lambda q: float(q[0]), grad=lambda q: np.array([1.0, 0.0])))


# ============================================================================
# Metrics and Christoffel symbols
# ============================================================================

class TestChristoffel:
    def test_euclidean_vanishes(self, euclidean):
        assert_allclose(christoffel(euclidean, [0.3, -1.2]), 0.0)

    def test_polar(self, polar):
        gamma = christoffel(polar, [2.0, 0.7])
        assert gamma[0, 1, 1] == pytest.approx(-2.0)
        assert gamma[1, 0, 1] == pytest.approx(0.5)
        assert gamma[1, 1, 0] == pytest.approx(0.5)
        assert gamma[0, 0, 0] == 0.0

    def test_sphere(self, sphere):
        gamma = christoffel(sphere, [QUARTER, 0.0])
        assert gamma[0, 1, 1] == pytest.approx(-0.5)
        assert gamma[1, 0, 1] == pytest.approx(1.0)

    def test_finite_difference_partials(self, polar):
        numeric = replace(polar, partials=None)
        q = [1.3, 0.4]
        assert_allclose(christoffel(numeric, q), christoffel(polar, q), atol=1e-5)

    def test_lower_indices_symmetric(self, sphere):
        gamma = christoffel(sphere, [1.1, 0.2])
        assert np.array_equal(gamma, gamma.transpose(0, 2, 1))


class TestMetricValidation:
    def test_asymmetric_metric(self):
        g = MetricField.constant([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(InvalidInputError) as excinfo:
            g([0.0, 0.0])
        assert "symmetry" in str(excinfo.value)

    def test_indefinite_metric(self):
        g = MetricField.constant([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(DomainViolationError):
            g.inverse([0.0, 0.0])


# ============================================================================
# Covariant derivative and geodesics
# ============================================================================

class TestCovariantDerivative:
    def test_rotation_in_the_plane(self, euclidean, rotation):
        assert_allclose(covariant_derivative(euclidean, rotation, rotation, [1.0, 0.0]), [-1.0, 0.0])

    def test_sphere_longitude_field(self, sphere):
        d_phi = VectorField.constant([0.0, 1.0])
        assert_allclose(covariant_derivative(sphere, d_phi, d_phi, [QUARTER, 0.0]), [-0.5, 0.0], atol=1e-12)


class TestGeodesics:
    def test_euclidean_straight_line(self, euclidean):
        traj = integrate_sode(geodesic_field(euclidean), [0.0, 1.0], [2.0, -1.0], 3.0)
        assert_allclose(traj.positions[-1], [6.0, -2.0], atol=1e-9)

    def test_sphere_equator(self, sphere):
        traj = integrate_sode(geodesic_field(sphere), [np.pi / 2, 0.0], [0.0, 1.0], 2 * np.pi)
        assert np.max(np.abs(traj.positions[:, 0] - np.pi / 2)) <= 1e-8

    def test_polar_straight_line(self, polar):
        """r cos(phi) = 1 is the line x = 1."""
        traj = integrate_sode(geodesic_field(polar), [1.0, 0.0], [0.0, 1.0], 1.0)
        r, phi = traj.positions[:, 0], traj.positions[:, 1]
        assert np.max(np.abs(r * np.cos(phi) - 1.0)) <= 1e-8
        assert geodesic_residual(polar, traj) <= 1e-8

    def test_sphere_speed_conserved(self, sphere):
        traj = integrate_sode(geodesic_field(sphere), [1.0, 0.0], [0.3, 0.5], 10.0)
        assert speed_drift(sphere, traj) <= 1e-7


class TestKineticEnergyAndLength:
    def test_kinetic_energy(self, euclidean, polar):
        assert kinetic_energy(euclidean, [1.0, 1.0], [0.0, 0.0]) == 0.0
        assert kinetic_energy(euclidean, [0.0, 0.0], [3.0, 4.0]) == pytest.approx(12.5)
        assert kinetic_energy(polar, [2.0, 0.0], [0.0, 1.0]) == pytest.approx(2.0)

    def test_unit_segment(self, euclidean):
        traj = integrate_flow(VectorField.constant([1.0, 0.0]), [0.0, 0.0], 1.0)
        assert arc_length(euclidean, traj) == pytest.approx(1.0, rel=1e-9)

    def test_circle_in_both_charts(self, euclidean, polar, rotation):
        cartesian = integrate_flow(rotation, [2.0, 0.0], 2 * np.pi)
        angular = integrate_flow(VectorField.constant([0.0, 1.0]), [2.0, 0.0], 2 * np.pi)
        assert arc_length(euclidean, cartesian) == pytest.approx(4 * np.pi, rel=1e-6)
        assert arc_length(polar, angular) == pytest.approx(4 * np.pi, rel=1e-9)


# ============================================================================
# Conformal rescaling
# ============================================================================

class TestConformal:
    def test_rescaled_metric(self, euclidean, sphere):
        assert_allclose(conformal_rescale(euclidean, ConformalFactor.constant(np.log(2.0), 2))([0.1, 0.2]), 4.0 * np.eye(2))
        q = [1.0, 0.0]
        expected = np.exp(0.6 * np.sin(1.0)) * sphere(q)
        assert_allclose(conformal_rescale(sphere, sine_phi())(q), expected)

    def test_closed_form_on_the_plane(self, euclidean):
        gamma = conformal_christoffel(euclidean, linear_phi(), [0.4, -0.3])
        assert gamma[0, 0, 0] == pytest.approx(1.0)
        assert gamma[0, 1, 1] == pytest.approx(-1.0)
        assert gamma[1, 0, 1] == pytest.approx(1.0)
        assert gamma[1, 1, 1] == pytest.approx(0.0)

    def test_closed_form_matches_rescaled_metric(self, sphere):
        phi = sine_phi()
        q = [1.1, 0.3]
        assert_allclose(conformal_christoffel(sphere, phi, q), christoffel(conformal_rescale(sphere, phi), q), atol=1e-9)

    def test_nabla_identity(self, euclidean, rotation, annulus):
        Y = VectorField.linear([[1.0, 2.0], [0.0, 1.0]], [1.0, 0.0])
        assert conformal_nabla_residual(euclidean, linear_phi(), rotation, Y, annulus) <= 1e-8

    def test_nabla_identity_on_the_sphere(self, sphere):
        X = VectorField.constant([0.0, 1.0])
        Y = VectorField.linear([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.0])
        pts = [[0.5, 0.0], [1.0, 1.0], [2.0, -1.0]]
        assert conformal_nabla_residual(sphere, sine_phi(), X, Y, pts) <= 1e-6


class TestGradient:
    def test_euclidean(self, euclidean, harmonic_potential):
        assert_allclose(gradient(euclidean, harmonic_potential, [1.0, 2.0]), [1.0, 2.0])

    def test_polar_angle(self, polar):
        angle = ScalarField(dim=2, func=lambda q: float(q[1]), grad=lambda q: np.array([0.0, 1.0]))
        assert_allclose(gradient(polar, angle, [2.0, 0.0]), [0.0, 0.25])


# ============================================================================
# Killing, autoparallel and pregeodesic fields
# ============================================================================

class TestFieldDiagnostics:
    def test_killing_fields(self, euclidean, polar, rotation):
        assert killing_residual(euclidean, rotation, [0.3, 1.7]) <= 1e-12
        assert killing_residual(polar, VectorField.constant([0.0, 1.0]), [1.5, 0.2]) <= 1e-12

    def test_stretch_is_not_killing(self, euclidean):
        stretch = VectorField.linear([[1.0, 0.0], [0.0, 0.0]])
        assert killing_residual(euclidean, stretch, [1.0, 1.0]) == pytest.approx(2.0)

    def test_autoparallel(self, euclidean, rotation):
        assert autoparallel_residual(euclidean, VectorField.constant([1.0, 2.0]), [0.5, 0.5]) == 0.0
        assert autoparallel_residual(euclidean, rotation, [1.0, 0.0]) == pytest.approx(1.0)

    def test_dilation_is_pregeodesic(self, euclidean, annulus):
        estimate = pregeodesic_factor(euclidean, liouville_field(2), annulus)
        assert estimate.residual <= 1e-12
        assert estimate.constant() == pytest.approx(1.0)

    def test_unit_meridians_have_vanishing_factor(self, sphere):
        meridian = VectorField.constant([1.0, 0.0], name="d/dtheta")
        samples = box_samples([0.3, 0.0], [2.8, 2.0 * np.pi], 40, seed=0)
        estimate = pregeodesic_factor(sphere, meridian, samples)
        assert estimate.residual <= 1e-12
        assert estimate.max_abs <= 1e-12

    def test_unit_radial_field_has_vanishing_factor(self, euclidean, annulus):
        unit_radial = VectorField(dim=2, func=lambda q: q / np.linalg.norm(q), name="q/|q|")
        estimate = pregeodesic_factor(euclidean, unit_radial, annulus)
        assert estimate.residual <= 1e-8
        assert estimate.max_abs <= 1e-8

    def test_rotation_is_not_pregeodesic(self, euclidean, rotation, annulus):
        assert pregeodesic_factor(euclidean, rotation, annulus).residual > 0.1


class TestGeodesicRescaling:
    def test_dilation_becomes_autoparallel(self, euclidean):
        delta = liouville_field(2)
        rescaling = geodesic_rescaling(euclidean, delta, ScalarField.constant(1.0, 2), [1.0, 0.0], 1.0)
        params = rescaling.trajectory.params
        assert_allclose(rescaling.values, np.exp(-params), rtol=1e-8)
        assert rescaling.field([2.0, 0.0]) == pytest.approx(0.5, rel=1e-6)
        assert autoparallel_residual(euclidean, rescaling.rescaled(delta), [1.5, 0.0]) <= 1e-5

    def test_closed_orbit_is_rejected(self, euclidean, rotation):
        with pytest.raises(CertificationError) as excinfo:
            geodesic_rescaling(
                euclidean, rotation, ScalarField.constant(1.0, 2), [1.0, 0.0], 2 * np.pi + 0.5, certify=False,
            )
        assert "single-valued" in str(excinfo.value)

    def test_certification_failure(self, euclidean, rotation):
        with pytest.raises(CertificationError):
            geodesic_rescaling(euclidean, rotation, ScalarField.constant(1.0, 2), [1.0, 0.0], 1.0)


# ============================================================================
# Reparametrized geodesics and connection identities
# ============================================================================

class TestReparametrizedGeodesics:
    @pytest.fixture
    def sphere_geodesic(self, sphere):
        opts = IntegratorOptions()
        return integrate_sode(geodesic_field(sphere), [1.0, 0.0], [0.3, 0.5], 3.0, opts)

    def test_affine_retime_keeps_lambda_zero(self, sphere, sphere_geodesic):
        retimed = reparametrize_by(sphere_geodesic, lambda s: 2.0, rate_slope=lambda s: 0.0)
        assert np.max(np.abs(fitted_lambda(sphere, retimed))) <= 1e-8

    def test_sundman_retime(self, sphere, sphere_geodesic):
        f = ScalarField(
            dim=2,
            func=lambda q: 1.0 + 0.5 * q[0] ** 2,
            grad=lambda q: np.array([q[0], 0.0]),
            positive=True,
        )
        retimed = reparametrize(sphere_geodesic, f)
        assert reparametrized_geodesic_residual(sphere, retimed) <= 1e-5
        assert_allclose(fitted_lambda(sphere, retimed), retimed.aux["lambda"][1:-1], atol=1e-6)

    def test_lambda_needs_retime_data(self, sphere, sphere_geodesic):
        with pytest.raises(InvalidInputError):
            reparametrized_geodesic_residual(sphere, sphere_geodesic)


class TestLeviCivita:
    def test_metric_compatibility(self, polar, polar_box):
        X = VectorField.linear([[0.1, 0.0], [0.0, 0.0]], [0.0, 1.0])
        Y = VectorField.linear([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.0])
        Z = VectorField.constant([1.0, -1.0])
        assert metric_compatibility_residual(polar, X, Y, Z, polar_box) <= 1e-5

    def test_torsion_free(self, polar, polar_box):
        X = VectorField.linear([[0.1, 0.0], [0.0, 0.0]], [0.0, 1.0])
        Y = VectorField.linear([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.0])
        assert torsion_residual(polar, X, Y, polar_box) <= 1e-8
