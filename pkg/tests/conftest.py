"""
Shared fields, metrics and sample sets for the test suite.
"""
import numpy as np
import pytest

from src.core.fields import ScalarField, VectorField
from src.core.riemann import MetricField
from src.core.sampling import annulus_samples, box_samples

ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


def polar_partials(q):
    D = np.zeros((2, 2, 2))
    D[1, 1, 0] = 2.0 * q[0]
    return D


def sphere_partials(q):
    D = np.zeros((2, 2, 2))
    D[1, 1, 0] = 2.0 * np.sin(q[0]) * np.cos(q[0])
    return D


@pytest.fixture
def euclidean():
    return MetricField.euclidean(2)


@pytest.fixture
def polar():
    """diag(1, r^2) in coordinates (r, phi)."""
    return MetricField(
        dim=2,
        func=lambda q: np.diag([1.0, q[0] ** 2]),
        partials=polar_partials,
        name="polar",
    )


@pytest.fixture
def sphere():
    """diag(1, sin^2 theta) in coordinates (theta, phi)."""
    return MetricField(
        dim=2,
        func=lambda q: np.diag([1.0, np.sin(q[0]) ** 2]),
        partials=sphere_partials,
        name="sphere",
    )


@pytest.fixture
def rotation():
    """-y d/dx + x d/dy."""
    return VectorField.linear(ROTATION, name="rotation")


@pytest.fixture
def radius_squared():
    return ScalarField(dim=2, func=lambda q: float(q @ q), grad=lambda q: 2.0 * q, name="F")


@pytest.fixture
def harmonic_potential():
    return ScalarField(dim=2, func=lambda q: 0.5 * float(q @ q), grad=lambda q: np.array(q, dtype=float), name="V")


@pytest.fixture
def annulus():
    return annulus_samples(2, 60, seed=0)


@pytest.fixture
def polar_box():
    """Points with r in [0.5, 2] for the polar chart."""
    return box_samples([0.5, 0.0], [2.0, 2.0 * np.pi], 40, seed=0)
