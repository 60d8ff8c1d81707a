"""
Reduced radial Kepler problem and its Sundman linearization.

With angular momentum l fixed, r'' = l^2/r^3 - k/r^2 (dots in t). Under
dt = r dtau and at fixed energy E the radial motion becomes the linear
equation r'' = 2 E r + k in tau, solved by the eccentric-anomaly ellipse
r(tau) = A (1 - e cos(w tau)), t(tau) = A (tau - (e/w) sin(w tau)).
Phases are measured from perihelion, which sits at tau = 0.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from src.core.fields import (
    LABEL_TAU,
    IntegratorOptions,
    ScalarField,
    SecondOrderField,
    Trajectory,
    integrate_sode,
    reparametrize,
)
from src.utils.error_handler import DomainViolationError, IntegrationError, InvalidInputError
from src.utils.performance_utils import performance_monitor

logger = logging.getLogger(__name__)

ENERGY_CONSISTENCY_TOL = 1e-12

# Extra quarter periods integrated past the requested span so two turning
# points of each kind are available for period detection.
PERIOD_MARGIN = 0.75

# Ceiling on adaptive tolerances; keeps the radial energy within 1e-9
# relative over five periods
KEPLER_RTOL = 1e-12
KEPLER_ATOL = 1e-13


@dataclass(frozen=True)
class KeplerParams:
    k: float
    l: float
    E: float

    def __post_init__(self):
        if not self.k > 0:
            raise InvalidInputError(f"attraction constant must be positive, got k = {self.k:g}")

    def effective_potential(self, r: float) -> float:
        return self.l ** 2 / (2.0 * r ** 2) - self.k / r

    def energy_at(self, r: float, rdot: float) -> float:
        return 0.5 * rdot ** 2 + self.effective_potential(r)

    @property
    def min_energy(self) -> float:
        """Bottom of the effective potential, -k^2 / (2 l^2)."""
        if self.l == 0:
            return -np.inf
        return -self.k ** 2 / (2.0 * self.l ** 2)

    @property
    def circular_radius(self) -> float:
        return self.l ** 2 / self.k

    def perihelion_state(self) -> Tuple[float, float]:
        ellipse = analytic_ellipse(self)
        return ellipse.r_min, 0.0


@dataclass(frozen=True)
class KeplerEllipse:
    A: float
    e: float
    omega: float

    def r(self, tau):
        return self.A * (1.0 - self.e * np.cos(self.omega * np.asarray(tau)))

    def r_prime(self, tau):
        """dr/dtau."""
        return self.A * self.e * self.omega * np.sin(self.omega * np.asarray(tau))

    def t(self, tau):
        tau = np.asarray(tau)
        return self.A * (tau - (self.e / self.omega) * np.sin(self.omega * tau))

    @property
    def r_min(self) -> float:
        return self.A * (1.0 - self.e)

    @property
    def r_max(self) -> float:
        return self.A * (1.0 + self.e)

    @property
    def tau_period(self) -> float:
        return 2.0 * np.pi / self.omega

    @property
    def t_period(self) -> float:
        return 2.0 * np.pi * self.A / self.omega

    def phase_of(self, r: float, r_prime: float) -> float:
        """tau offset of the state (r, dr/dtau) from perihelion."""
        if self.e == 0.0:
            return 0.0
        cos_part = (1.0 - r / self.A) / self.e
        sin_part = r_prime / (self.A * self.e * self.omega)
        return float(np.arctan2(sin_part, cos_part)) / self.omega


def _positive_radius(state: np.ndarray) -> bool:
    return bool(state[0] > 0.0)


def radial_field(p: KeplerParams) -> SecondOrderField:
    """r'' = l^2/r^3 - k/r^2 on r > 0."""
    return SecondOrderField(
        dim=1,
        rhs=lambda r, v: np.array([p.l ** 2 / r[0] ** 3 - p.k / r[0] ** 2]),
        domain_guard=_positive_radius,
        name="kepler-radial",
    )


def linearized_field(p: KeplerParams) -> SecondOrderField:
    """r'' = 2 E r + k in the eccentric anomaly."""
    return SecondOrderField(
        dim=1,
        rhs=lambda r, v: np.array([2.0 * p.E * r[0] + p.k]),
        name="kepler-linear",
    )


def sundman_factor() -> ScalarField:
    """f(r) = r, the classical dt = r dtau."""
    return ScalarField(
        dim=1,
        func=lambda r: float(r[0]),
        grad=lambda r: np.ones(1),
        positive=True,
        domain_guard=_positive_radius,
        name="r",
    )


def analytic_ellipse(p: KeplerParams) -> KeplerEllipse:
    if not p.E < 0:
        raise InvalidInputError(f"E = {p.E:g} is not elliptic (hyperbolic/parabolic motion is not supported)")
    if p.l == 0:
        raise InvalidInputError("l = 0 is a collision orbit, not an ellipse")
    if p.E < p.min_energy * (1.0 + 1e-12):
        raise InvalidInputError(f"E = {p.E:g} lies below the effective-potential minimum {p.min_energy:g}")
    A = p.k / (2.0 * abs(p.E))
    e_squared = 1.0 - p.l ** 2 / (p.k * A)
    e = float(np.sqrt(e_squared)) if e_squared > 0 else 0.0
    return KeplerEllipse(A=A, e=e, omega=float(np.sqrt(2.0 * abs(p.E))))


def detect_period(traj: Trajectory, component: int = 0) -> Optional[float]:
    """Period from successive same-direction sign changes of the velocity.

    Crossings are refined by root finding on the dense output; None when
    fewer than two crossings of either direction occur.
    """
    if traj.order != 2:
        raise InvalidInputError("period detection needs a second-order trajectory")
    n = traj.config_dim
    index = n + component
    velocity = traj.states[:, index]
    spline = traj.interpolant

    def crossing(i):
        a, b = traj.params[i], traj.params[i + 1]
        if velocity[i + 1] == 0.0:
            return float(b)
        return float(brentq(lambda s: float(spline(s)[index]), a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps))

    falling, rising = [], []
    for i in range(len(traj) - 1):
        if velocity[i] > 0.0 >= velocity[i + 1]:
            falling.append(crossing(i))
        elif velocity[i] < 0.0 <= velocity[i + 1]:
            rising.append(crossing(i))

    estimates = [
        (times[-1] - times[0]) / (len(times) - 1)
        for times in (falling, rising)
        if len(times) >= 2
    ]
    if not estimates:
        return None
    return float(np.mean(estimates))


def time_law_residual(ellipse: KeplerEllipse, tau, t, phase: float = 0.0) -> float:
    """max |t - (t_ell(tau + phase) - t_ell(phase))|."""
    tau = np.asarray(tau, dtype=float)
    predicted = ellipse.t(tau + phase) - ellipse.t(phase)
    return float(np.max(np.abs(np.asarray(t, dtype=float) - predicted)))


@dataclass(frozen=True, eq=False)
class LinearizationReport:
    deviation_linear: float
    deviation_analytic: float
    time_law_residual: float
    energy_identity_residual: float
    energy_drift: float
    tau_period: Optional[float]
    expected_tau_period: float
    radial: Trajectory
    sundman: Trajectory
    linear: Trajectory
    stats: Dict[str, int] = field(default_factory=dict)

    @property
    def period_error(self) -> Optional[float]:
        """Relative error of the detected tau-period; None for circular orbits."""
        if self.tau_period is None:
            return None
        return abs(self.tau_period - self.expected_tau_period) / self.expected_tau_period

    def metrics(self) -> Dict[str, float]:
        values = {
            "deviation_linear": self.deviation_linear,
            "deviation_analytic": self.deviation_analytic,
            "time_law_residual": self.time_law_residual,
            "energy_identity_residual": self.energy_identity_residual,
            "energy_drift": self.energy_drift,
        }
        if self.period_error is not None:
            values["period_error"] = self.period_error
        return values


def _kepler_options(opts: IntegratorOptions) -> IntegratorOptions:
    if opts.method != "adaptive":
        return opts
    return replace(opts, rtol=min(opts.rtol, KEPLER_RTOL), atol=min(opts.atol, KEPLER_ATOL))


def _collision(p: KeplerParams, r0: float, rdot0: float, periods: float, opts: IntegratorOptions) -> None:
    """Radial fall with l = 0 reaches r = 0 in finite time; report where the curve stops."""
    if not p.E < 0:
        raise InvalidInputError("l = 0 with E >= 0 escapes or collides without a period")
    A = p.k / (2.0 * abs(p.E))
    span = (periods + PERIOD_MARGIN) * 2.0 * np.pi * A ** 1.5 / np.sqrt(p.k)
    try:
        radial = integrate_sode(radial_field(p), [r0], [rdot0], span, opts)
    except IntegrationError as exc:
        raise DomainViolationError(f"collision: integration stopped near r = 0 ({exc.message})") from exc
    reason = radial.truncation_reason or "radius left the domain"
    raise DomainViolationError(f"collision: radial trajectory truncated ({reason})", radial.states[-1])


@performance_monitor
def linearization_check(
    p: KeplerParams,
    r0: float,
    rdot0: float,
    periods: float = 1.0,
    opts: Optional[IntegratorOptions] = None,
) -> LinearizationReport:
    """Integrate in t, retime with dt = r dtau, and compare with the linear equation and the ellipse.

    Adaptive runs use tolerances no looser than KEPLER_RTOL and KEPLER_ATOL.
    """
    opts = _kepler_options(opts or IntegratorOptions())
    if not r0 > 0:
        raise InvalidInputError(f"initial radius must be positive, got {r0:g}")
    start_energy = p.energy_at(r0, rdot0)
    if abs(start_energy - p.E) > ENERGY_CONSISTENCY_TOL * max(1.0, abs(p.E)):
        raise InvalidInputError(f"initial data has energy {start_energy:.15g}, expected E = {p.E:.15g}")
    if not periods > 0:
        raise InvalidInputError("periods must be positive")

    if p.l == 0:
        _collision(p, r0, rdot0, periods, opts)
    ellipse = analytic_ellipse(p)
    span = (periods + PERIOD_MARGIN) * ellipse.t_period
    radial = integrate_sode(radial_field(p), [r0], [rdot0], span, opts)

    sundman = reparametrize(radial, sundman_factor(), label=LABEL_TAU, tol=opts.atol)
    tau = sundman.params
    linear = integrate_sode(linearized_field(p), [r0], [r0 * rdot0], tau[-1], opts, label=LABEL_TAU)

    r_sundman = sundman.states[:, 0]
    r_prime = sundman.states[:, 1]
    deviation_linear = float(np.max(np.abs(r_sundman - linear.at(tau)[:, 0])))

    phase = ellipse.phase_of(r0, r0 * rdot0)
    deviation_analytic = float(np.max(np.abs(r_sundman - ellipse.r(tau + phase))))
    time_law = time_law_residual(ellipse, tau, radial.params, phase)

    identity = 2.0 * r_sundman ** 2 * p.E - (r_prime ** 2 + p.l ** 2 - 2.0 * p.k * r_sundman)
    energies = np.array([p.energy_at(y[0], y[1]) for y in radial.states])

    report = LinearizationReport(
        deviation_linear=deviation_linear,
        deviation_analytic=deviation_analytic,
        time_law_residual=time_law,
        energy_identity_residual=float(np.max(np.abs(identity))),
        energy_drift=float(np.max(np.abs(energies - energies[0])) / abs(energies[0])),
        tau_period=detect_period(sundman),
        expected_tau_period=ellipse.tau_period,
        radial=radial,
        sundman=sundman,
        linear=linear,
        stats={
            "radial_steps": int(radial.stats.get("steps", 0)),
            "linear_steps": int(linear.stats.get("steps", 0)),
        },
    )
    logger.info(
        "Kepler linearization: deviation %.3e (linear) %.3e (analytic), tau period %s",
        deviation_linear, deviation_analytic, report.tau_period,
    )
    return report
