"""
Linear-structure criteria built on the Liouville (dilation) field.

With Delta = sum q^i d/dq^i and [X, Y] = (DY) X - (DX) Y:
  * X is linear   iff [Delta, X] = 0,
  * X is affine   iff [Delta, [Delta, X]] + [Delta, X] = 0,
  * [X, Delta] = h X admits a Sundman factor f with Delta(log f) = h, and
    then fX commutes with Delta.
"""
import logging
from typing import Optional, Union

import numpy as np

from src.core.fields import (
    FactorEstimate,
    ScalarField,
    VectorField,
    adaptive_quad,
    as_point,
    as_samples,
    collinear_factor,
    lie_bracket,
    scale_field,
)
from src.utils.error_handler import CertificationError, DimensionMismatchError, DomainViolationError

logger = logging.getLogger(__name__)

# Dilation offsets for the second directional difference
AFFINITY_STEP = 1e-3
AFFINITY_STEP_ANALYTIC = 1e-4

RAY_QUADRATURE_TOL = 1e-10


def liouville_field(n: int) -> VectorField:
    """Delta with components Delta^i(q) = q^i."""
    if n < 1:
        raise DimensionMismatchError(f"Liouville field needs n >= 1, got {n}")
    return VectorField.linear(np.eye(n), name="Delta")


def dilation_bracket(X: VectorField, q) -> np.ndarray:
    """[Delta, X](q) = (DX) q - X(q)."""
    q = as_point(q, X.dim)
    return X.jacobian_at(q) @ q - X(q)


def linearity_residual(X: VectorField, samples) -> float:
    pts = as_samples(samples, X.dim)
    return float(max(np.linalg.norm(dilation_bracket(X, q)) for q in pts))


def _second_dilation_derivative(X: VectorField, q: np.ndarray) -> np.ndarray:
    # [Delta, [Delta, X]] + [Delta, X] equals D^2 X(q, q)
    if X.jacobian is not None:
        eps = AFFINITY_STEP_ANALYTIC
        return (X.jacobian_at((1 + eps) * q) @ q - X.jacobian_at((1 - eps) * q) @ q) / (2 * eps)
    eps = AFFINITY_STEP
    return (X((1 + eps) * q) - 2.0 * X(q) + X((1 - eps) * q)) / eps ** 2


def affinity_residual(X: VectorField, samples) -> float:
    """max over samples of |[Delta, [Delta, X]] + [Delta, X]|."""
    pts = as_samples(samples, X.dim)
    return float(max(np.linalg.norm(_second_dilation_derivative(X, q)) for q in pts))


def conformal_eigen_factor(X: VectorField, samples) -> FactorEstimate:
    """Fit [Delta, X] = h X pointwise.

    The returned values follow the [Delta, X] convention; the factor that
    `linearizing_factor` expects ([X, Delta] = h X) is their negative.
    """
    return collinear_factor(lambda q: dilation_bracket(X, q), X, samples, name="h")


def linearizing_factor(
    X: VectorField,
    h: Union[ScalarField, FactorEstimate, float],
) -> ScalarField:
    """Sundman factor f with Delta(log f) = h, normalized to 1 on the unit sphere.

    `h` is the function in [X, Delta] = h X. A FactorEstimate from
    `conformal_eigen_factor` is accepted directly and its sign flipped.
    Constant h gives f(q) = |q|^h exactly; otherwise log f is integrated
    along the dilation ray s -> e^s q/|q| for s in [0, log|q|].
    """
    n = X.dim
    if isinstance(h, FactorEstimate):
        value = h.constant()
        h = ScalarField(dim=n, func=lambda q, fit=h.field: -fit.func(q), name="h") if value is None else -value
    if isinstance(h, ScalarField) and h.constant_value is not None:
        h = h.constant_value
    if not isinstance(h, ScalarField):
        return _power_factor(n, float(h))
    if h.dim != n:
        raise DimensionMismatchError(f"h has dimension {h.dim}, field has {n}")
    return _ray_factor(h)


def _power_factor(n: int, exponent: float) -> ScalarField:
    if exponent == 0.0:
        return ScalarField.constant(1.0, n, name="f")

    def func(q):
        r = float(np.linalg.norm(q))
        if r == 0.0:
            raise DomainViolationError("linearizing factor undefined at the origin", q)
        return r ** exponent

    return ScalarField(
        dim=n,
        func=func,
        grad=lambda q: exponent * float(np.linalg.norm(q)) ** (exponent - 2.0) * q,
        positive=True,
        domain_guard=lambda q: bool(np.linalg.norm(q) > 0.0),
        name=f"|q|^{exponent:g}",
    )


def _ray_factor(h: ScalarField) -> ScalarField:
    def log_f(q):
        r = float(np.linalg.norm(q))
        if r == 0.0:
            raise DomainViolationError("linearizing factor undefined at the origin", q)
        direction = q / r

        def integrand(s):
            point = np.exp(s) * direction
            if not h.admissible(point):
                raise DomainViolationError("dilation ray leaves the domain of h", point)
            return h.func(point)

        value, error, message = adaptive_quad(integrand, 0.0, float(np.log(r)), RAY_QUADRATURE_TOL)
        if message:
            logger.debug("ray quadrature at %s: %s (error estimate %.2e)", q, message, error)
        if not np.isfinite(value) or error > 1e-6 * max(1.0, abs(value)):
            raise CertificationError("h is not radially integrable", residual=error, point=q)
        return value

    return ScalarField(
        dim=h.dim,
        func=lambda q: float(np.exp(log_f(np.asarray(q, dtype=float)))),
        positive=True,
        domain_guard=lambda q: bool(np.linalg.norm(q) > 0.0),
        name="f",
    )


def linearized_bracket_residual(X: VectorField, f: ScalarField, samples) -> float:
    """max over samples of |[fX, Delta]|; zero when fX is linear."""
    delta = liouville_field(X.dim)
    fX = scale_field(X, f)
    pts = as_samples(samples, X.dim)
    return float(max(np.linalg.norm(lie_bracket(fX, delta, q)) for q in pts))


def certify_linearizable(X: VectorField, samples, tol: float = 1e-6) -> Optional[ScalarField]:
    """The linearizing factor when the eigen-factor fit is certified on the samples, else None."""
    estimate = conformal_eigen_factor(X, samples)
    if estimate.residual > tol:
        logger.info("no factor h with [Delta, X] = h X (residual %.3e)", estimate.residual)
        return None
    return linearizing_factor(X, estimate)
