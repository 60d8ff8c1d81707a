"""
Mechanical-type and Newtonian dynamics on a Riemannian chart, energy
bookkeeping, Sundman reparametrization of Newtonian solutions, and the
Jacobi metric (E0 - V) g whose geodesics are the fixed-energy orbits.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from src.core.fields import (
    LABEL_S,
    IntegratorOptions,
    ScalarField,
    SecondOrderField,
    Trajectory,
    VectorField,
    as_point,
    as_samples,
    central_gradient,
    integrate_sode,
    orbit_distance,
    time_map,
)
from src.core.riemann import (
    ConformalFactor,
    MetricField,
    arc_length_profile,
    christoffel,
    christoffel_contract,
    conformal_rescale,
    covariant_derivative,
    geodesic_field,
    gradient,
    kinetic_energy,
)
from src.utils.error_handler import (
    DimensionMismatchError,
    DomainViolationError,
    InvalidInputError,
)
from src.utils.performance_utils import PointCache, performance_monitor
from src.utils.settings import JACOBI_MARGIN

logger = logging.getLogger(__name__)

ENERGY_MATCH_TOL = 1e-10


@dataclass(frozen=True)
class MechanicalSystem:
    g: MetricField
    V: ScalarField
    name: str = ""

    def __post_init__(self):
        if self.g.dim != self.V.dim:
            raise DimensionMismatchError(f"metric dim {self.g.dim} vs potential dim {self.V.dim}")

    @property
    def dim(self) -> int:
        return self.g.dim


@dataclass(frozen=True)
class ForceField:
    """Z(q, v); a basic force depends on q only and ignores v."""

    dim: int
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    basic: bool = False
    name: str = ""

    @classmethod
    def positional(cls, dim: int, func: Callable[[np.ndarray], np.ndarray], name: str = "") -> "ForceField":
        return cls(dim=dim, func=lambda q, v: func(q), basic=True, name=name)

    @classmethod
    def potential(cls, g: MetricField, V: ScalarField) -> "ForceField":
        """Z = -grad_g V."""
        return cls.positional(g.dim, lambda q: -gradient(g, V, q), name=f"-grad {V.name or 'V'}")

    @classmethod
    def drag(cls, dim: int, coefficient: float = 1.0) -> "ForceField":
        return cls(dim=dim, func=lambda q, v: -coefficient * v, name=f"drag({coefficient:g})")

    @classmethod
    def zero(cls, dim: int) -> "ForceField":
        return cls.positional(dim, lambda q: np.zeros(dim), name="0")

    def __call__(self, q, v=None) -> np.ndarray:
        q = as_point(q, self.dim)
        if v is None:
            if not self.basic:
                raise InvalidInputError(f"force {self.name or 'Z'} depends on velocities")
            v = np.zeros(self.dim)
        value = np.atleast_1d(np.asarray(self.func(q, as_point(v, self.dim)), dtype=float))
        if value.shape != (self.dim,):
            raise DimensionMismatchError(f"force returned shape {value.shape}, expected ({self.dim},)")
        return value


def energy(sys: MechanicalSystem, q, v) -> float:
    return kinetic_energy(sys.g, q, v) + sys.V(q)


def _combined_guard(*guards):
    active = [g for g in guards if g is not None]
    if not active:
        return None
    return lambda q: all(g(q) for g in active)


def mechanical_sode(sys: MechanicalSystem) -> SecondOrderField:
    """q'' = -Gamma(q', q') - grad_g V."""
    g, V = sys.g, sys.V
    return SecondOrderField(
        dim=g.dim,
        rhs=lambda q, v: -christoffel_contract(christoffel(g, q), v, v) - gradient(g, V, q),
        domain_guard=_combined_guard(g.domain_guard, V.domain_guard),
        name=sys.name or "mechanical",
    )


def newtonian_sode(g: MetricField, Z: ForceField) -> SecondOrderField:
    """q'' = -Gamma(q', q') + Z(q, q')."""
    if g.dim != Z.dim:
        raise DimensionMismatchError(f"metric dim {g.dim} vs force dim {Z.dim}")
    return SecondOrderField(
        dim=g.dim,
        rhs=lambda q, v: -christoffel_contract(christoffel(g, q), v, v) + Z.func(q, v),
        domain_guard=g.domain_guard,
        name=f"newton[{Z.name or 'Z'}]",
    )


def _require_basic(Z: ForceField) -> None:
    if not Z.basic:
        raise InvalidInputError("velocity-dependent forces are not supported by field residuals")


def nabla_force_residual(g: MetricField, X: VectorField, Z: ForceField, samples) -> float:
    """max |nabla_X X - Z|; zero when the integral curves of X solve q'' = -Gamma + Z."""
    _require_basic(Z)
    pts = as_samples(samples, g.dim)
    cache = PointCache()
    return float(max(np.linalg.norm(covariant_derivative(g, X, X, q, cache) - Z(q)) for q in pts))


def sundman_newton_residual(g: MetricField, Y: VectorField, Z: ForceField, h: ScalarField, samples) -> float:
    """max |nabla_Y Y - Y(log h) Y - h^2 Z| over the samples."""
    _require_basic(Z)
    pts = as_samples(samples, g.dim)
    cache = PointCache()
    worst = 0.0
    for q in pts:
        y = Y(q)
        value = h(q)
        if not value > 0:
            raise DomainViolationError(f"nonpositive Sundman factor {value:.6g}", q)
        lam = float(h.gradient(q) @ y) / value
        residual = covariant_derivative(g, Y, Y, q, cache) - lam * y - value ** 2 * Z(q)
        worst = max(worst, float(np.linalg.norm(residual)))
    return worst


def energy_constancy_residual(sys: MechanicalSystem, X: VectorField, samples) -> float:
    """max |X(E(X))| with E(X)(q) = T_g(X(q)) + V(q)."""
    pts = as_samples(samples, sys.dim)

    def energy_of_field(q):
        return energy(sys, q, X(q))

    return float(max(abs(central_gradient(energy_of_field, q) @ X(q)) for q in pts))


def energy_drift(sys: MechanicalSystem, traj: Trajectory) -> float:
    """Relative drift max |E - E(0)| / |E(0)| (absolute when E(0) = 0)."""
    if traj.order != 2:
        raise InvalidInputError("energy drift needs a second-order trajectory")
    n = traj.config_dim
    values = np.array([energy(sys, y[:n], y[n:]) for y in traj.states])
    scale = abs(values[0]) if values[0] != 0.0 else 1.0
    return float(np.max(np.abs(values - values[0])) / scale)


def rescale_to_energy(sys: MechanicalSystem, q0, v0, E0: float) -> np.ndarray:
    """v0 scaled so that E(q0, v) = E0."""
    q0 = as_point(q0, sys.dim)
    v0 = as_point(v0, sys.dim)
    available = E0 - sys.V(q0)
    if not available > 0:
        raise InvalidInputError(f"energy {E0:g} is not above the potential {sys.V(q0):g} at the initial point", q0)
    T0 = kinetic_energy(sys.g, q0, v0)
    if not T0 > 0:
        raise InvalidInputError("cannot rescale a vanishing initial velocity", q0)
    return v0 * np.sqrt(available / T0)


def reparametrized_mechanical_residual(sys: MechanicalSystem, traj: Trajectory) -> float:
    """max |q'' + Gamma(q', q') - lambda q' + xi^2 grad_g V| on a retimed mechanical trajectory."""
    if traj.order != 2 or "rate" not in traj.aux:
        raise InvalidInputError("a retimed second-order trajectory is required")
    n = traj.config_dim
    inner = slice(1, len(traj) - 1)
    accelerations = np.asarray(traj.interpolant.derivative()(traj.params[inner]))[:, n:]
    worst = 0.0
    for y, a, xi, lam in zip(traj.states[inner], accelerations, traj.aux["rate"][inner], traj.aux["lambda"][inner]):
        q, v = y[:n], y[n:]
        residual = a + christoffel_contract(christoffel(sys.g, q), v, v) - lam * v + xi ** 2 * gradient(sys.g, sys.V, q)
        worst = max(worst, float(np.linalg.norm(residual)))
    return worst


def conformal_mechanical_residual(g: MetricField, phi: ConformalFactor, V: ScalarField, traj: Trajectory) -> float:
    """Mechanical motion for (e^{2phi} g, V) written with g-quantities.

    Residual of q'' + Gamma(q', q') + 2 q'(phi) q' - g(q', q') grad_g phi
    + e^{-2phi} grad_g V; V = 0 gives the conformal geodesic equation.
    """
    if traj.order != 2:
        raise InvalidInputError("a second-order trajectory is required")
    n = traj.config_dim
    inner = slice(1, len(traj) - 1)
    accelerations = np.asarray(traj.interpolant.derivative()(traj.params[inner]))[:, n:]
    worst = 0.0
    for y, a in zip(traj.states[inner], accelerations):
        q, v = y[:n], y[n:]
        residual = (
            a
            + christoffel_contract(christoffel(g, q), v, v)
            + 2.0 * float(phi.gradient(q) @ v) * v
            - g.inner(q, v, v) * gradient(g, phi.phi, q)
            + np.exp(-2.0 * phi(q)) * gradient(g, V, q)
        )
        worst = max(worst, float(np.linalg.norm(residual)))
    return worst


@dataclass(frozen=True)
class JacobiMetric:
    """(E0 - V) g on {V < E0}, i.e. e^{2phi} g with phi = 1/2 log(E0 - V)."""

    base: MetricField
    V: ScalarField
    E0: float
    metric: MetricField
    phi: ConformalFactor

    def margin(self, q) -> float:
        return self.E0 - self.V(q)


def jacobi_metric(sys: MechanicalSystem, E0: float, region=None) -> JacobiMetric:
    """Build the Jacobi metric at energy E0; `region` samples must satisfy V < E0."""
    V = sys.V
    E0 = float(E0)
    if region is not None:
        pts = as_samples(region, sys.dim)
        top = max(V(q) for q in pts)
        if top >= E0:
            raise InvalidInputError(f"energy {E0:g} does not exceed max V = {top:g} on the requested region")
    floor = JACOBI_MARGIN * abs(E0)

    def gap(q):
        value = E0 - float(V.func(q))
        if not value > 0:
            raise DomainViolationError(f"outside the Jacobi domain (E0 - V = {value:.6g})", q)
        return value

    phi_grad = None
    if V.grad is not None:
        phi_grad = lambda q: -np.asarray(V.grad(q), dtype=float) / (2.0 * gap(q))

    phi = ConformalFactor(ScalarField(
        dim=sys.dim,
        func=lambda q: 0.5 * np.log(gap(q)),
        grad=phi_grad,
        domain_guard=_combined_guard(V.domain_guard, lambda q: E0 - float(V.func(q)) > floor),
        name="phi_J",
    ))
    return JacobiMetric(base=sys.g, V=V, E0=E0, metric=conformal_rescale(sys.g, phi), phi=phi)


def gradient_identity_residual(sys: MechanicalSystem, E0: float, samples) -> float:
    """max |grad_g(1/2 log(E0 - V)) + grad_g V / (2 (E0 - V))| with the left side by finite differences."""
    pts = as_samples(samples, sys.dim)
    log_gap = ScalarField(dim=sys.dim, func=lambda q: 0.5 * np.log(E0 - float(sys.V.func(q))))
    worst = 0.0
    for q in pts:
        w = E0 - sys.V(q)
        if not w > 0:
            raise DomainViolationError("sample outside the Jacobi domain", q)
        lhs = gradient(sys.g, log_gap, q)
        rhs = -gradient(sys.g, sys.V, q) / (2.0 * w)
        worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return worst


@dataclass(frozen=True, eq=False)
class JacobiReport:
    """Comparison of a fixed-energy mechanical orbit with the Jacobi geodesic from the same data.

    The geodesic runs in parameter sigma with d sigma/dt = (E0 - V)/(E0 - V(q0)),
    so its Jacobi arc length is s_E = sqrt(2) (E0 - V(q0)) sigma.
    """

    mechanical: Trajectory
    geodesic: Trajectory
    orbit_distance: float
    parametrized_deviation: float
    arc_length_mismatch: float
    energy_drift: float
    sigma_end: float
    truncated: bool
    stats: Dict[str, int] = field(default_factory=dict)

    def metrics(self) -> Dict[str, float]:
        return {
            "orbit_distance": self.orbit_distance,
            "parametrized_deviation": self.parametrized_deviation,
            "arc_length_mismatch": self.arc_length_mismatch,
            "energy_drift": self.energy_drift,
        }


@performance_monitor
def jacobi_equivalence(
    sys: MechanicalSystem,
    E0: float,
    q0,
    v0,
    T: float,
    opts: Optional[IntegratorOptions] = None,
) -> JacobiReport:
    """Integrate the mechanical orbit at energy E0 and the Jacobi geodesic from (q0, v0) and compare."""
    opts = opts or IntegratorOptions()
    q0 = as_point(q0, sys.dim)
    v0 = as_point(v0, sys.dim)
    E_start = energy(sys, q0, v0)
    if abs(E_start - E0) > ENERGY_MATCH_TOL * max(1.0, abs(E0)):
        raise InvalidInputError(f"initial energy {E_start:.12g} differs from E0 = {E0:.12g}; rescale v0 first")

    jacobi = jacobi_metric(sys, E0)
    guard = jacobi.phi.phi.domain_guard
    if not guard(q0):
        raise DomainViolationError("initial point violates the Jacobi margin", q0)

    dynamics = mechanical_sode(sys)
    guarded = SecondOrderField(dim=dynamics.dim, rhs=dynamics.rhs, domain_guard=guard, name=dynamics.name)
    mechanical = integrate_sode(guarded, q0, v0, T, opts)

    w0 = jacobi.margin(q0)
    sundman = ScalarField(dim=sys.dim, func=lambda q: w0 / jacobi.margin(q), positive=True, name="f_J")
    sigma = time_map(mechanical, sundman, label=LABEL_S, tol=opts.atol)
    sigma_end = float(sigma.target[-1])

    geodesic = integrate_sode(geodesic_field(jacobi.metric), q0, v0, sigma_end, opts, label=LABEL_S)

    config_mech = mechanical.positions_only()
    config_geo = geodesic.positions_only()
    distance = orbit_distance(config_mech, config_geo)

    inside = sigma.target <= geodesic.params[-1]
    matched = config_geo.at(sigma.target[inside])
    parametrized = float(np.max(np.linalg.norm(matched - config_mech.states[inside], axis=1)))

    lengths = arc_length_profile(jacobi.metric, mechanical, tol=opts.atol)
    mismatch = float(np.max(np.abs(lengths - np.sqrt(2.0) * w0 * sigma.target)))

    truncated = mechanical.truncated or geodesic.truncated
    if truncated:
        logger.warning("Jacobi comparison truncated: %s", mechanical.truncation_reason or geodesic.truncation_reason)

    report = JacobiReport(
        mechanical=mechanical,
        geodesic=geodesic,
        orbit_distance=distance,
        parametrized_deviation=parametrized,
        arc_length_mismatch=mismatch,
        energy_drift=energy_drift(sys, mechanical),
        sigma_end=sigma_end,
        truncated=truncated,
        stats={
            "mechanical_steps": int(mechanical.stats.get("steps", 0)),
            "geodesic_steps": int(geodesic.stats.get("steps", 0)),
        },
    )
    logger.info(
        "Jacobi equivalence: orbit distance %.3e, parametrized deviation %.3e, sigma_end %.6g",
        distance, parametrized, sigma_end,
    )
    return report
