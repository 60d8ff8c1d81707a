"""
Riemannian metrics on a chart: Christoffel symbols, covariant derivatives,
geodesic flows, conformal rescaling and the geodesic / Killing /
pregeodesic field diagnostics.

Array conventions: g[i, j]; metric partials D[i, j, k] = d g_ij / d q^k;
Christoffel symbols G[i, j, k] = Gamma^i_jk, symmetric in (j, k).
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize_scalar

from src.core.fields import (
    FactorEstimate,
    IntegratorOptions,
    ScalarField,
    SecondOrderField,
    Trajectory,
    VectorField,
    as_point,
    as_samples,
    central_gradient,
    central_jacobian,
    collinear_factor,
    cumulative_quadrature,
    integrate_flow,
    lie_bracket,
)
from src.utils.error_handler import (
    CertificationError,
    DimensionMismatchError,
    DomainViolationError,
    InvalidInputError,
)
from src.utils.performance_utils import PointCache
from src.utils.settings import DEFAULT_ATOL

logger = logging.getLogger(__name__)

# A curve counts as closed when it comes back this close to its start
CLOSURE_TOL = 1e-6


@dataclass(frozen=True)
class MetricField:
    """q -> symmetric positive-definite matrix g(q)."""

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    partials: Optional[Callable[[np.ndarray], np.ndarray]] = None
    domain_guard: Optional[Callable[[np.ndarray], bool]] = None
    name: str = ""

    @classmethod
    def constant(cls, matrix, name: str = "") -> "MetricField":
        G = np.atleast_2d(np.asarray(matrix, dtype=float))
        n = G.shape[0]
        return cls(dim=n, func=lambda q: G.copy(), partials=lambda q: np.zeros((n, n, n)), name=name)

    @classmethod
    def euclidean(cls, n: int) -> "MetricField":
        return cls.constant(np.eye(n), name="euclidean")

    def __call__(self, q) -> np.ndarray:
        q = as_point(q, self.dim)
        G = np.asarray(self.func(q), dtype=float).reshape(self.dim, self.dim)
        if not np.all(np.isfinite(G)):
            raise DomainViolationError("non-finite metric entries", q)
        if not np.array_equal(G, G.T):
            raise InvalidInputError(f"metric {self.name or 'g'} violates invariant 'symmetry'", q)
        return G

    def factor(self, q):
        """Cholesky factor; failure means g lost positive definiteness at q."""
        G = self(q)
        try:
            return cho_factor(G)
        except LinAlgError:
            raise DomainViolationError("metric lost positive definiteness", q) from None

    def inverse(self, q) -> np.ndarray:
        return cho_solve(self.factor(q), np.eye(self.dim))

    def derivatives(self, q) -> np.ndarray:
        q = as_point(q, self.dim)
        if self.partials is not None:
            D = np.asarray(self.partials(q), dtype=float).reshape(self.dim, self.dim, self.dim)
        else:
            D = central_jacobian(self.__call__, q)
        if not np.all(np.isfinite(D)):
            raise DomainViolationError("non-finite metric partials", q)
        return D

    def inner(self, q, u, w) -> float:
        return float(np.asarray(u) @ self(q) @ np.asarray(w))

    def admissible(self, q) -> bool:
        return self.domain_guard is None or bool(self.domain_guard(np.asarray(q, dtype=float)))


@dataclass(frozen=True)
class ConformalFactor:
    """The function phi of g_bar = exp(2 phi) g."""

    phi: ScalarField

    @classmethod
    def constant(cls, value: float, dim: int) -> "ConformalFactor":
        return cls(ScalarField.constant(value, dim, name="phi"))

    @property
    def dim(self) -> int:
        return self.phi.dim

    def __call__(self, q) -> float:
        return self.phi(q)

    def gradient(self, q) -> np.ndarray:
        return self.phi.gradient(q)


def _metric_data(g: MetricField, q: np.ndarray, cache: Optional[PointCache]):
    def compute():
        return g(q), g.derivatives(q), g.inverse(q)

    if cache is None:
        return compute()
    return cache.get_or_compute(q, compute)


def christoffel(g: MetricField, q, cache: Optional[PointCache] = None) -> np.ndarray:
    """Gamma^i_jk = 1/2 g^il (d_k g_lj + d_j g_lk - d_l g_jk)."""
    q = as_point(q, g.dim)
    _, D, G_inv = _metric_data(g, q, cache)
    lowered = 0.5 * (D + np.einsum("ljk->lkj", D) - np.einsum("jkl->ljk", D))
    gamma = np.einsum("il,ljk->ijk", G_inv, lowered)
    gamma = 0.5 * (gamma + gamma.transpose(0, 2, 1))
    if not np.all(np.isfinite(gamma)):
        raise DomainViolationError("non-finite Christoffel symbols", q)
    return gamma


@dataclass(frozen=True)
class ChristoffelField:
    metric: MetricField

    @property
    def dim(self) -> int:
        return self.metric.dim

    def __call__(self, q) -> np.ndarray:
        return christoffel(self.metric, q)


def christoffel_contract(gamma: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijk,j,k->i", gamma, u, w)


def covariant_derivative(g: MetricField, X: VectorField, Y: VectorField, q, cache: Optional[PointCache] = None) -> np.ndarray:
    """(nabla_X Y)^k = X^i d_i Y^k + Gamma^k_ji Y^j X^i."""
    if not (g.dim == X.dim == Y.dim):
        raise DimensionMismatchError(f"metric dim {g.dim}, field dims {X.dim} and {Y.dim}")
    q = as_point(q, g.dim)
    x, y = X(q), Y(q)
    return Y.jacobian_at(q) @ x + christoffel_contract(christoffel(g, q, cache), y, x)


def geodesic_field(g: MetricField) -> SecondOrderField:
    return SecondOrderField(
        dim=g.dim,
        rhs=lambda q, v: -christoffel_contract(christoffel(g, q), v, v),
        domain_guard=g.domain_guard,
        name=f"geodesic[{g.name or 'g'}]",
    )


def kinetic_energy(g: MetricField, q, v) -> float:
    q = as_point(q, g.dim)
    v = as_point(v, g.dim)
    return 0.5 * float(v @ g(q) @ v)


def _velocity_along(traj: Trajectory) -> Callable[[float], Tuple[np.ndarray, np.ndarray]]:
    n = traj.config_dim
    spline = traj.interpolant
    if traj.order == 2:
        return lambda s: (lambda y: (y[:n], y[n:]))(np.asarray(spline(s)))
    slope = spline.derivative()
    return lambda s: (np.asarray(spline(s)), np.asarray(slope(s)))


def arc_length_profile(g: MetricField, traj: Trajectory, tol: float = DEFAULT_ATOL) -> np.ndarray:
    """Cumulative length int sqrt(g(q', q')) at the trajectory nodes."""
    if len(traj) < 2:
        raise InvalidInputError("arc length needs at least two nodes")
    if traj.config_dim != g.dim:
        raise DimensionMismatchError(f"trajectory dim {traj.config_dim} vs metric dim {g.dim}")
    along = _velocity_along(traj)

    def speed(s):
        q, v = along(s)
        return float(np.sqrt(max(v @ g(q) @ v, 0.0)))

    return cumulative_quadrature(traj, speed, tol)


def arc_length(g: MetricField, traj: Trajectory, tol: float = DEFAULT_ATOL) -> float:
    return float(arc_length_profile(g, traj, tol)[-1])


def conformal_rescale(g: MetricField, phi: ConformalFactor) -> MetricField:
    """g_bar = exp(2 phi) g, partials e^{2phi} (2 d_k phi g_ij + d_k g_ij) when both are analytic."""
    if phi.dim != g.dim:
        raise DimensionMismatchError(f"conformal factor dim {phi.dim} vs metric dim {g.dim}")

    partials = None
    if g.partials is not None and phi.phi.grad is not None:
        def partials(q):
            scale = np.exp(2.0 * phi(q))
            return scale * (2.0 * np.einsum("ij,k->ijk", g(q), phi.gradient(q)) + g.derivatives(q))

    guard = g.domain_guard
    if phi.phi.domain_guard is not None:
        inner = phi.phi.domain_guard
        guard = inner if guard is None else (lambda q: g.domain_guard(q) and inner(q))

    return MetricField(
        dim=g.dim,
        func=lambda q: np.exp(2.0 * phi(q)) * g(q),
        partials=partials,
        domain_guard=guard,
        name=f"exp(2phi){g.name or 'g'}",
    )


def gradient(g: MetricField, V: ScalarField, q) -> np.ndarray:
    """grad_g V = g^{-1} dV."""
    q = as_point(q, g.dim)
    return cho_solve(g.factor(q), V.gradient(q))


def conformal_christoffel(g: MetricField, phi: ConformalFactor, q, cache: Optional[PointCache] = None) -> np.ndarray:
    """Gamma_bar = Gamma + delta^i_j d_k phi + delta^i_k d_j phi - g_jk grad_g(phi)^i."""
    q = as_point(q, g.dim)
    G, _, G_inv = _metric_data(g, q, cache)
    dphi = phi.gradient(q)
    eye = np.eye(g.dim)
    return (
        christoffel(g, q, cache)
        + np.einsum("ij,k->ijk", eye, dphi)
        + np.einsum("ik,j->ijk", eye, dphi)
        - np.einsum("jk,i->ijk", G, G_inv @ dphi)
    )


def conformal_nabla_residual(g: MetricField, phi: ConformalFactor, X: VectorField, Y: VectorField, samples) -> float:
    """max |nabla_bar_X Y - (nabla_X Y + X(phi) Y + Y(phi) X - g(X, Y) grad_g phi)|."""
    g_bar = conformal_rescale(g, phi)
    pts = as_samples(samples, g.dim)
    cache = PointCache()
    worst = 0.0
    for q in pts:
        x, y = X(q), Y(q)
        dphi = phi.gradient(q)
        lhs = covariant_derivative(g_bar, X, Y, q)
        rhs = (
            covariant_derivative(g, X, Y, q, cache)
            + (dphi @ x) * y
            + (dphi @ y) * x
            - g.inner(q, x, y) * gradient(g, phi.phi, q)
        )
        worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return worst


def killing_residual(g: MetricField, X: VectorField, q) -> float:
    """Frobenius norm of (L_X g)_ij = X^k d_k g_ij + g_kj d_i X^k + g_ik d_j X^k."""
    if g.dim != X.dim:
        raise DimensionMismatchError(f"metric dim {g.dim} vs field dim {X.dim}")
    q = as_point(q, g.dim)
    G, D = g(q), g.derivatives(q)
    J = X.jacobian_at(q)
    lie = np.einsum("k,ijk->ij", X(q), D) + J.T @ G + G @ J
    return float(np.linalg.norm(lie))


def autoparallel_residual(g: MetricField, X: VectorField, q) -> float:
    return float(np.linalg.norm(covariant_derivative(g, X, X, q)))


def pregeodesic_factor(g: MetricField, X: VectorField, samples) -> FactorEstimate:
    """Fit nabla_X X = f X pointwise; a small residual certifies X pregeodesic."""
    cache = PointCache()
    return collinear_factor(lambda q: covariant_derivative(g, X, X, q, cache), X, samples, name="f")


@dataclass(frozen=True, eq=False)
class GeodesicRescaling:
    """lambda with X(log lambda) = -f along one integral curve of X, lambda(q0) = 1.

    `field` extends lambda off the curve by projecting points onto the
    curve's parameter, which is all lambda*X needs to be evaluated along it.
    """

    trajectory: Trajectory
    values: np.ndarray
    log_profile: CubicHermiteSpline

    def at_parameter(self, t) -> np.ndarray:
        return np.exp(self.log_profile(t))

    def project(self, q) -> float:
        """Curve parameter of the foot point of q, by Newton steps from the nearest node."""
        traj = self.trajectory
        positions = traj.positions
        j = int(np.argmin(np.linalg.norm(positions - q, axis=1)))
        spline = traj.interpolant
        slope = spline.derivative()
        accel = slope.derivative()
        lo, hi = traj.span
        t = float(traj.params[j])
        for _ in range(4):
            d = np.asarray(spline(t)) - q
            v = np.asarray(slope(t))
            a = np.asarray(accel(t))
            denom = float(v @ v + d @ a)
            if denom <= 0.0:
                break
            t = float(np.clip(t - float(d @ v) / denom, lo, hi))
        return t

    @property
    def field(self) -> ScalarField:
        traj = self.trajectory
        return ScalarField(
            dim=traj.config_dim,
            func=lambda q: float(self.at_parameter(self.project(np.asarray(q, dtype=float)))),
            positive=True,
            name="lambda",
        )

    def rescaled(self, X: VectorField) -> VectorField:
        lam = self.field
        return VectorField(dim=X.dim, func=lambda q: lam(q) * X(q), name=f"lambda*{X.name or 'X'}")


def geodesic_rescaling(
    g: MetricField,
    X: VectorField,
    f: ScalarField,
    q0,
    T: float,
    opts: Optional[IntegratorOptions] = None,
    certify: bool = True,
    tol: float = 1e-6,
) -> GeodesicRescaling:
    """Integrate log lambda' = -f along the flow of X from q0 over [0, T].

    With `certify`, nabla_X X = f X is first checked along the curve. A curve
    that closes up with a nonzero integral of f has no single-valued lambda.
    """
    traj = integrate_flow(X, q0, T, opts)
    nodes = traj.states[:: max(1, len(traj) // 50)]
    if certify:
        estimate = pregeodesic_factor(g, X, nodes)
        if estimate.residual > tol:
            raise CertificationError("X is not pregeodesic along the curve", residual=estimate.residual)
        mismatch = max(abs(f(q) - c) for q, c in zip(estimate.samples, estimate.values))
        if mismatch > tol * 10:
            raise CertificationError("f does not match nabla_X X = f X", residual=mismatch)

    spline = traj.interpolant
    integral = cumulative_quadrature(traj, lambda t: f(np.asarray(spline(t))), (opts or IntegratorOptions()).atol)
    log_values = -integral
    log_slopes = -np.array([f(q) for q in traj.states])
    profile = CubicHermiteSpline(traj.params, log_values, log_slopes)
    _check_single_valued(traj, profile, tol)
    return GeodesicRescaling(trajectory=traj, values=np.exp(log_values), log_profile=profile)


def _check_single_valued(traj: Trajectory, profile: CubicHermiteSpline, tol: float) -> None:
    """Raise when the curve returns to its start with log lambda != 0 there."""
    start = traj.states[0]
    scale = max(1.0, float(np.linalg.norm(start)))
    distance = np.linalg.norm(traj.states - start, axis=1)
    far = int(np.argmax(distance))
    if distance[far] <= CLOSURE_TOL * scale:
        return
    j = far + int(np.argmin(distance[far:]))
    if j == far:
        return
    last = len(traj) - 1
    lo, hi = traj.params[max(j - 1, far)], traj.params[min(j + 1, last)]
    spline = traj.interpolant
    res = minimize_scalar(
        lambda t: float(np.sum((np.asarray(spline(t)) - start) ** 2)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12 * max(1.0, abs(hi - lo))},
    )
    if np.sqrt(max(res.fun, 0.0)) > CLOSURE_TOL * scale:
        return
    jump = abs(float(profile(res.x)))
    if jump > tol:
        raise CertificationError(
            "lambda is not single-valued: the orbit closes with a nonzero integral of f",
            residual=jump,
        )


# ---------------------------------------------------------------------------
# Residuals on sampled curves
# ---------------------------------------------------------------------------

def _second_order_nodes(traj: Trajectory, g: MetricField):
    if traj.order != 2:
        raise InvalidInputError("a second-order trajectory with velocities is required")
    if traj.config_dim != g.dim:
        raise DimensionMismatchError(f"trajectory dim {traj.config_dim} vs metric dim {g.dim}")
    if len(traj) < 3:
        raise InvalidInputError("residuals need at least three nodes")
    n = traj.config_dim
    inner = traj.params[1:-1]
    accelerations = np.asarray(traj.interpolant.derivative()(inner))[:, n:]
    return traj.states[1:-1, :n], traj.states[1:-1, n:], accelerations, slice(1, len(traj) - 1)


def geodesic_residual(g: MetricField, traj: Trajectory) -> float:
    """max over interior nodes of |q'' + Gamma(q', q')|."""
    qs, vs, accs, _ = _second_order_nodes(traj, g)
    return float(max(np.linalg.norm(a + christoffel_contract(christoffel(g, q), v, v)) for q, v, a in zip(qs, vs, accs)))


def reparametrized_geodesic_residual(g: MetricField, traj: Trajectory) -> float:
    """max |q'' + Gamma(q', q') - lambda q'| for a geodesic retimed with rate xi, lambda = xi'/xi."""
    if "lambda" not in traj.aux:
        raise InvalidInputError("trajectory carries no reparametrization data")
    qs, vs, accs, inner = _second_order_nodes(traj, g)
    lam = np.asarray(traj.aux["lambda"])[inner]
    return float(max(
        np.linalg.norm(a + christoffel_contract(christoffel(g, q), v, v) - l * v)
        for q, v, a, l in zip(qs, vs, accs, lam)
    ))


def fitted_lambda(g: MetricField, traj: Trajectory) -> np.ndarray:
    """lambda read off the curve itself: g(q'' + Gamma(q', q'), q') / g(q', q') at interior nodes.

    Exact for a reparametrized geodesic, where q'' + Gamma(q', q') = lambda q'.
    """
    qs, vs, accs, _ = _second_order_nodes(traj, g)
    values = []
    for q, v, a in zip(qs, vs, accs):
        G = g(q)
        speed = float(v @ G @ v)
        if not speed > 0:
            raise DomainViolationError("curve stalls, lambda undefined", q)
        values.append(float((a + christoffel_contract(christoffel(g, q), v, v)) @ G @ v) / speed)
    return np.array(values)


def speed_drift(g: MetricField, traj: Trajectory) -> float:
    """Relative drift of g(q', q') along a second-order trajectory."""
    if traj.order != 2:
        raise InvalidInputError("speed drift needs a second-order trajectory")
    n = traj.config_dim
    speeds = np.array([kinetic_energy(g, y[:n], y[n:]) for y in traj.states])
    return float(np.max(np.abs(speeds - speeds[0])) / max(abs(speeds[0]), np.finfo(float).tiny))


def metric_compatibility_residual(g: MetricField, X: VectorField, Y: VectorField, Z: VectorField, samples) -> float:
    """max |X(g(Y, Z)) - g(nabla_X Y, Z) - g(Y, nabla_X Z)|."""
    pts = as_samples(samples, g.dim)
    cache = PointCache()
    worst = 0.0
    for q in pts:
        pairing = central_gradient(lambda p: g.inner(p, Y(p), Z(p)), q) @ X(q)
        rhs = g.inner(q, covariant_derivative(g, X, Y, q, cache), Z(q)) + g.inner(q, Y(q), covariant_derivative(g, X, Z, q, cache))
        worst = max(worst, abs(pairing - rhs))
    return float(worst)


def torsion_residual(g: MetricField, X: VectorField, Y: VectorField, samples) -> float:
    """max |nabla_X Y - nabla_Y X - [X, Y]|."""
    pts = as_samples(samples, g.dim)
    cache = PointCache()
    return float(max(
        np.linalg.norm(
            covariant_derivative(g, X, Y, q, cache) - covariant_derivative(g, Y, X, q, cache) - lie_bracket(X, Y, q)
        )
        for q in pts
    ))
