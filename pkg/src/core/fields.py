"""
Vector fields on a coordinate chart, their flows and Sundman rescaling.

A Sundman transformation dt = f(q) dtau replaces the dynamical field X by
fX: both fields share orbits and first integrals, only the parameter along
the orbits changes. This module provides the field types, an adaptive flow
integrator with dense output, the time map tau(t), reparametrization of
sampled trajectories and the bracket / divergence diagnostics used by the
linear-structure and Jacobi-multiplier checks.

Bracket convention used everywhere: [X, Y] = (DY) X - (DX) Y.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import RK45, quad
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from src.utils.error_handler import (
    DimensionMismatchError,
    DomainViolationError,
    IntegrationError,
    InvalidInputError,
)
from src.utils.settings import (
    DEFAULT_ATOL,
    DEFAULT_MAX_STEPS,
    DEFAULT_RTOL,
    FD_FLOOR,
    FD_RELATIVE,
    VANISHING_NORM,
)

logger = logging.getLogger(__name__)

LABEL_T = "t"
LABEL_TAU = "tau"
LABEL_S = "s"
LABELS = (LABEL_T, LABEL_TAU, LABEL_S)

# Fraction of the span used as first step when the step heuristic leaves the guard
FIRST_STEP_FRACTION = 1e-6

QUAD_RELATIVE_FLOOR = 1e-13
QUAD_LIMIT = 50

Point = np.ndarray


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def fd_steps(q: np.ndarray) -> np.ndarray:
    """Central-difference step per coordinate: max(1e-6, 1e-6 |q_j|)."""
    return np.maximum(FD_FLOOR, FD_RELATIVE * np.abs(q))


def central_jacobian(func: Callable[[np.ndarray], np.ndarray], q: np.ndarray) -> np.ndarray:
    """Matrix J[i, j] = d func^i / d q^j by central differences."""
    q = np.asarray(q, dtype=float)
    steps = fd_steps(q)
    columns = []
    for j, h in enumerate(steps):
        e = np.zeros_like(q)
        e[j] = h
        columns.append((np.asarray(func(q + e), dtype=float) - np.asarray(func(q - e), dtype=float)) / (2.0 * h))
    return np.stack(columns, axis=-1)


def central_gradient(func: Callable[[np.ndarray], float], q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    steps = fd_steps(q)
    grad = np.empty_like(q)
    for j, h in enumerate(steps):
        e = np.zeros_like(q)
        e[j] = h
        grad[j] = (float(func(q + e)) - float(func(q - e))) / (2.0 * h)
    return grad


def as_point(q, dim: int) -> np.ndarray:
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if q.shape != (dim,):
        raise DimensionMismatchError(f"expected a point of dimension {dim}, got shape {q.shape}")
    return q


def as_samples(samples, dim: int) -> np.ndarray:
    pts = np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, dim) if dim == 1 else pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise DimensionMismatchError(f"samples must have shape (m, {dim}), got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Field types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """A function q -> R, optionally with an analytic gradient.

    With `positive=True` every evaluation is checked, which is how Sundman
    factors, densities and conformal weights report nonpositive samples.
    """

    dim: int
    func: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    positive: bool = False
    domain_guard: Optional[Callable[[np.ndarray], bool]] = None
    constant_value: Optional[float] = None
    name: str = ""

    @classmethod
    def constant(cls, value: float, dim: int, name: str = "") -> "ScalarField":
        value = float(value)
        return cls(
            dim=dim,
            func=lambda q: value,
            grad=lambda q: np.zeros(dim),
            positive=value > 0,
            constant_value=value,
            name=name or f"const({value:g})",
        )

    def __call__(self, q) -> float:
        q = as_point(q, self.dim)
        value = float(self.func(q))
        if not np.isfinite(value):
            raise DomainViolationError(f"non-finite value of {self.name or 'scalar field'}", q)
        if self.positive and not value > 0.0:
            raise DomainViolationError(f"nonpositive {self.name or 'factor'} value {value:.6g}", q)
        return value

    def gradient(self, q) -> np.ndarray:
        q = as_point(q, self.dim)
        if self.grad is not None:
            return np.asarray(self.grad(q), dtype=float).reshape(self.dim)
        return central_gradient(self.func, q)

    def admissible(self, q) -> bool:
        return self.domain_guard is None or bool(self.domain_guard(np.asarray(q, dtype=float)))

    def reciprocal(self) -> "ScalarField":
        """The field 1/f, gradient -grad f / f^2."""
        base = self
        grad = None
        if base.grad is not None:
            grad = lambda q: -np.asarray(base.grad(q), dtype=float) / float(base.func(q)) ** 2
        return ScalarField(
            dim=base.dim,
            func=lambda q: 1.0 / float(base.func(q)),
            grad=grad,
            positive=base.positive,
            domain_guard=base.domain_guard,
            constant_value=None if base.constant_value is None else 1.0 / base.constant_value,
            name=f"1/{base.name or 'f'}",
        )


@dataclass(frozen=True)
class VectorField:
    """A first-order field q -> X(q) in R^dim.

    `order=2` marks fields on a tangent bundle whose state is (q, v) and whose
    first block is v; integral curves then carry velocities.
    """

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    domain_guard: Optional[Callable[[np.ndarray], bool]] = None
    order: int = 1
    name: str = ""

    @classmethod
    def linear(cls, A, B=None, name: str = "") -> "VectorField":
        """Affine field X(q) = A q + B with its exact Jacobian."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.zeros(A.shape[0]) if B is None else np.atleast_1d(np.asarray(B, dtype=float))
        return cls(dim=A.shape[0], func=lambda q: A @ q + B, jacobian=lambda q: A.copy(), name=name)

    @classmethod
    def constant(cls, components, name: str = "") -> "VectorField":
        c = np.atleast_1d(np.asarray(components, dtype=float))
        return cls.linear(np.zeros((c.size, c.size)), c, name=name)

    def __call__(self, q) -> np.ndarray:
        q = as_point(q, self.dim)
        value = np.atleast_1d(np.asarray(self.func(q), dtype=float))
        if value.shape != (self.dim,):
            raise DimensionMismatchError(
                f"field {self.name or 'X'} returned {value.shape} components, expected {self.dim}"
            )
        return value

    def jacobian_at(self, q) -> np.ndarray:
        """Analytic Jacobian when supplied, central differences otherwise."""
        q = as_point(q, self.dim)
        if self.jacobian is not None:
            J = np.asarray(self.jacobian(q), dtype=float).reshape(self.dim, self.dim)
        else:
            J = central_jacobian(self.__call__, q)
        if not np.all(np.isfinite(J)):
            raise DomainViolationError("non-finite Jacobian entries", q)
        return J

    def jacobian_error(self, q) -> float:
        """Max deviation of the analytic Jacobian from central differences (0 without one)."""
        if self.jacobian is None:
            return 0.0
        q = as_point(q, self.dim)
        return float(np.max(np.abs(self.jacobian_at(q) - central_jacobian(self.__call__, q))))

    def admissible(self, q) -> bool:
        return self.domain_guard is None or bool(self.domain_guard(np.asarray(q, dtype=float)))


@dataclass(frozen=True)
class SecondOrderField:
    """Tangent-bundle dynamics (q, v) -> (v, F(q, v))."""

    dim: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    domain_guard: Optional[Callable[[np.ndarray], bool]] = None
    name: str = ""

    def acceleration(self, q, v) -> np.ndarray:
        q = as_point(q, self.dim)
        v = as_point(v, self.dim)
        a = np.atleast_1d(np.asarray(self.rhs(q, v), dtype=float))
        if a.shape != (self.dim,):
            raise DimensionMismatchError(f"acceleration has shape {a.shape}, expected ({self.dim},)")
        return a

    def as_vector_field(self) -> VectorField:
        n = self.dim
        guard = None
        if self.domain_guard is not None:
            guard = lambda y: self.domain_guard(y[:n])
        return VectorField(
            dim=2 * n,
            func=lambda y: np.concatenate([y[n:], self.acceleration(y[:n], y[n:])]),
            domain_guard=guard,
            order=2,
            name=self.name,
        )


@dataclass(frozen=True)
class VolumeForm:
    """Omega = rho dq^1 ^ ... ^ dq^n with rho > 0."""

    dim: int
    density: ScalarField

    @classmethod
    def euclidean(cls, dim: int) -> "VolumeForm":
        return cls(dim=dim, density=ScalarField.constant(1.0, dim, name="rho"))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Monotone parameter samples with states and state derivatives.

    Dense output is the cubic Hermite interpolant through (params, states,
    derivatives). For `order=2` the states are (q, v) with v = dq/dparam.
    `aux` carries per-node arrays produced by reparametrization (the rate
    d(old)/d(new) and lambda = d log(rate)/d(new)).
    """

    label: str
    params: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    order: int = 1
    truncated: bool = False
    truncation_reason: str = ""
    stats: Mapping[str, int] = field(default_factory=dict)
    aux: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise InvalidInputError(f"unknown parameter label {self.label!r}")
        params = np.asarray(self.params, dtype=float).reshape(-1)
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        derivatives = np.asarray(self.derivatives, dtype=float).reshape(states.shape)
        if len(params) != len(states):
            raise DimensionMismatchError("states length must equal params length")
        if len(params) > 1 and not np.all(np.diff(params) > 0):
            raise InvalidInputError("trajectory parameters must be strictly increasing")
        if self.order == 2 and states.shape[1] % 2:
            raise DimensionMismatchError("second-order states need an even dimension")
        for arr in (params, states, derivatives):
            arr.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "derivatives", derivatives)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def config_dim(self) -> int:
        return self.dim // 2 if self.order == 2 else self.dim

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, : self.config_dim]

    @property
    def velocities(self) -> np.ndarray:
        """dq/dparam at the nodes."""
        n = self.config_dim
        if self.order == 2:
            return self.states[:, n:]
        return self.derivatives

    @property
    def accelerations(self) -> np.ndarray:
        if self.order != 2:
            raise InvalidInputError("accelerations are only stored for second-order trajectories")
        return self.derivatives[:, self.config_dim:]

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.params[0]), float(self.params[-1])

    @cached_property
    def interpolant(self) -> CubicHermiteSpline:
        if len(self) < 2:
            raise InvalidInputError("dense output needs at least two nodes")
        return CubicHermiteSpline(self.params, self.states, self.derivatives, axis=0)

    def at(self, s):
        """Dense-output state at parameter s; stored nodes are returned exactly."""
        s_arr = np.asarray(s, dtype=float)
        lo, hi = self.span
        if np.any(s_arr < lo) or np.any(s_arr > hi):
            raise InvalidInputError(f"parameter outside the trajectory span [{lo:g}, {hi:g}]")
        if s_arr.ndim == 0:
            idx = int(np.searchsorted(self.params, float(s_arr)))
            if idx < len(self) and self.params[idx] == float(s_arr):
                return self.states[idx].copy()
            return np.asarray(self.interpolant(float(s_arr)))
        values = np.asarray(self.interpolant(s_arr))
        idx = np.clip(np.searchsorted(self.params, s_arr), 0, len(self) - 1)
        exact = self.params[idx] == s_arr
        values[exact] = self.states[idx[exact]]
        return values

    def positions_only(self) -> "Trajectory":
        """The configuration curve of a second-order trajectory."""
        if self.order != 2:
            return self
        n = self.config_dim
        return Trajectory(
            label=self.label,
            params=self.params,
            states=self.states[:, :n],
            derivatives=self.states[:, n:],
            truncated=self.truncated,
            truncation_reason=self.truncation_reason,
            stats=self.stats,
        )


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegratorOptions:
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    max_steps: int = DEFAULT_MAX_STEPS
    method: str = "adaptive"
    step: Optional[float] = None

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise InvalidInputError("integrator tolerances must be positive")
        if self.method not in ("adaptive", "fixed"):
            raise InvalidInputError(f"unknown integration method {self.method!r}")
        if self.method == "fixed" and not (self.step and self.step > 0):
            raise InvalidInputError("fixed-step integration needs a positive step")


class _GuardExit(Exception):
    def __init__(self, y):
        super().__init__("domain guard violated")
        self.y = np.array(y, dtype=float)


def _span(span) -> Tuple[float, float]:
    if np.isscalar(span):
        t0, t1 = 0.0, float(span)
    else:
        t0, t1 = (float(x) for x in span)
    if not t1 > t0:
        raise InvalidInputError(f"integration span must have T > t0, got [{t0:g}, {t1:g}]")
    return t0, t1


def integrate_flow(
    X: VectorField,
    q0,
    span,
    opts: Optional[IntegratorOptions] = None,
    label: str = LABEL_T,
) -> Trajectory:
    """Integral curve of X from q0 over span ([0, T] or (t0, t1)).

    Adaptive mode uses the embedded Runge-Kutta 4(5) pair; fixed mode uses the
    classical fourth-order scheme with step `opts.step`. A domain-guard
    violation truncates the curve at the last admissible node and flags it.
    """
    opts = opts or IntegratorOptions()
    t0, t1 = _span(span)
    q0 = as_point(q0, X.dim)
    if not X.admissible(q0):
        raise DomainViolationError("initial point outside the domain guard", q0)

    counter = {"nfev": 0}

    def rhs(t, y):
        if not X.admissible(y):
            raise _GuardExit(y)
        counter["nfev"] += 1
        dy = X(y)
        if not np.all(np.isfinite(dy)):
            raise IntegrationError("non-finite derivative", y)
        return dy

    if opts.method == "fixed":
        params, states, derivs, reason = _integrate_fixed(rhs, t0, t1, q0, opts)
    else:
        params, states, derivs, reason = _integrate_adaptive(rhs, t0, t1, q0, opts)

    if reason:
        logger.info("trajectory of %s truncated at %s = %.6g: %s", X.name or "X", label, params[-1], reason)
    return Trajectory(
        label=label,
        params=np.array(params),
        states=np.array(states),
        derivatives=np.array(derivs),
        order=X.order,
        truncated=bool(reason),
        truncation_reason=reason,
        stats={"steps": len(params) - 1, "nfev": counter["nfev"]},
    )


def _start_solver(rhs, t0, t1, q0, opts) -> RK45:
    try:
        return RK45(rhs, t0, q0, t1, rtol=opts.rtol, atol=opts.atol)
    except _GuardExit:
        # the initial-step heuristic evaluated a point outside the guard; start small instead
        first_step = (t1 - t0) * FIRST_STEP_FRACTION
        logger.debug("initial step estimate left the domain guard, starting with h = %.3g", first_step)
        return RK45(rhs, t0, q0, t1, rtol=opts.rtol, atol=opts.atol, first_step=first_step)


def _integrate_adaptive(rhs, t0, t1, q0, opts):
    solver = _start_solver(rhs, t0, t1, q0, opts)
    params, states, derivs = [t0], [q0.copy()], [np.array(solver.f, dtype=float)]
    reason = ""
    steps = 0
    while solver.status == "running":
        if steps >= opts.max_steps:
            raise IntegrationError(f"step budget of {opts.max_steps} exhausted at t = {solver.t:.6g}", solver.y)
        try:
            message = solver.step()
        except _GuardExit as exc:
            reason = f"domain guard violated near q = {np.array2string(exc.y, precision=6)}"
            break
        steps += 1
        if solver.status == "failed":
            raise IntegrationError(f"integrator failed: {message}", solver.y)
        params.append(solver.t)
        states.append(np.array(solver.y, dtype=float))
        derivs.append(np.array(solver.f, dtype=float))
    return params, states, derivs, reason


def _integrate_fixed(rhs, t0, t1, q0, opts):
    n_steps = max(1, int(np.ceil((t1 - t0) / opts.step - 1e-9)))
    if n_steps > opts.max_steps:
        raise IntegrationError(f"fixed step needs {n_steps} steps, budget is {opts.max_steps}")
    h = (t1 - t0) / n_steps
    y = q0.copy()
    k1 = rhs(t0, y)
    params, states, derivs = [t0], [y.copy()], [k1.copy()]
    reason = ""
    for i in range(n_steps):
        t = t0 + i * h
        try:
            k2 = rhs(t + h / 2, y + h / 2 * k1)
            k3 = rhs(t + h / 2, y + h / 2 * k2)
            k4 = rhs(t + h, y + h * k3)
            y_new = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            k1 = rhs(t + h, y_new)
        except _GuardExit as exc:
            reason = f"domain guard violated near q = {np.array2string(exc.y, precision=6)}"
            break
        y = y_new
        params.append(t0 + (i + 1) * h)
        states.append(y.copy())
        derivs.append(k1.copy())
    return params, states, derivs, reason


def integrate_sode(
    field_: SecondOrderField,
    q0,
    v0,
    span,
    opts: Optional[IntegratorOptions] = None,
    label: str = LABEL_T,
) -> Trajectory:
    """Integrate a second-order field from position q0 and velocity v0."""
    y0 = np.concatenate([as_point(q0, field_.dim), as_point(v0, field_.dim)])
    return integrate_flow(field_.as_vector_field(), y0, span, opts, label=label)


# ---------------------------------------------------------------------------
# Sundman scaling and reparametrization
# ---------------------------------------------------------------------------

def scale_field(X: VectorField, f: ScalarField) -> VectorField:
    """The Sundman-rescaled field fX.

    f is checked for positivity at every evaluated point; the Jacobian is
    composed by the product rule when X and f both carry analytic derivatives.
    """
    if f.dim != X.dim:
        raise DimensionMismatchError(f"factor dimension {f.dim} does not match field dimension {X.dim}")
    factor = f if f.positive else ScalarField(
        dim=f.dim, func=f.func, grad=f.grad, positive=True,
        domain_guard=f.domain_guard, constant_value=f.constant_value, name=f.name,
    )

    jacobian = None
    if X.jacobian is not None and f.grad is not None:
        def jacobian(q):
            return factor(q) * X.jacobian_at(q) + np.outer(X(q), factor.gradient(q))

    guard = X.domain_guard
    if f.domain_guard is not None:
        guard = (lambda q: f.domain_guard(q)) if guard is None else (lambda q: X.domain_guard(q) and f.domain_guard(q))

    return VectorField(
        dim=X.dim,
        func=lambda q: factor(q) * X(q),
        jacobian=jacobian,
        domain_guard=guard,
        name=f"{factor.name or 'f'}*{X.name or 'X'}",
    )


def _factor_input(traj: Trajectory, f: ScalarField) -> Tuple[slice, bool]:
    """Which slice of the state f reads: positions (basic factor) or the full state."""
    if f.dim == traj.dim:
        return slice(0, traj.dim), True
    if traj.order == 2 and f.dim == traj.config_dim:
        return slice(0, traj.config_dim), False
    raise DimensionMismatchError(
        f"factor dimension {f.dim} fits neither the state ({traj.dim}) nor the configuration ({traj.config_dim})"
    )


def adaptive_quad(integrand: Callable[[float], float], a: float, b: float, tol: float) -> Tuple[float, float, str]:
    """quad with its error estimate and diagnostic message ("" when clean)."""
    result = quad(integrand, a, b, epsabs=tol, epsrel=max(tol, QUAD_RELATIVE_FLOOR), limit=QUAD_LIMIT, full_output=1)
    message = result[3].splitlines()[0] if len(result) > 3 else ""
    return float(result[0]), float(result[1]), message


def cumulative_quadrature(traj: Trajectory, integrand: Callable[[float], float], tol: float) -> np.ndarray:
    """Cumulative integral of integrand(s) over the trajectory nodes."""
    cumulative = np.zeros(len(traj))
    flagged, worst_error, first_message = 0, 0.0, ""
    for i in range(len(traj) - 1):
        piece, error, message = adaptive_quad(integrand, traj.params[i], traj.params[i + 1], tol)
        cumulative[i + 1] = cumulative[i] + piece
        if message:
            flagged += 1
            worst_error = max(worst_error, error)
            first_message = first_message or message
    if flagged:
        logger.info(
            "quadrature flagged %d of %d intervals (largest error estimate %.2e): %s",
            flagged, len(traj) - 1, worst_error, first_message,
        )
    return cumulative


@dataclass(frozen=True, eq=False)
class TimeMap:
    """Monotone map between the old and new parameters of a curve."""

    source_label: str
    target_label: str
    source: np.ndarray
    target: np.ndarray

    @cached_property
    def _forward(self):
        return PchipInterpolator(self.source, self.target)

    @cached_property
    def _backward(self):
        return PchipInterpolator(self.target, self.source)

    def __call__(self, s):
        return self._forward(s)

    def inverse(self, tau):
        return self._backward(tau)


def time_map(traj: Trajectory, f: ScalarField, label: str = LABEL_TAU, tol: float = DEFAULT_ATOL) -> TimeMap:
    """tau(t) = int_0^t 1/f(x(zeta)) dzeta, sampled at the trajectory nodes."""
    sl, _ = _factor_input(traj, f)
    if len(traj) < 2:
        raise InvalidInputError("time map needs at least two nodes")
    factor = f if f.positive else ScalarField(dim=f.dim, func=f.func, grad=f.grad, positive=True, name=f.name)
    spline = traj.interpolant

    def integrand(s):
        return 1.0 / factor(np.asarray(spline(s))[sl])

    for state in traj.states:
        factor(state[sl])
    target = cumulative_quadrature(traj, integrand, tol)
    if not np.all(np.diff(target) > 0):
        raise DomainViolationError("time map is not strictly increasing")
    return TimeMap(source_label=traj.label, target_label=label, source=traj.params.copy(), target=target)


def _retime(traj: Trajectory, new_params: np.ndarray, rates: np.ndarray, slopes: np.ndarray, label: str) -> Trajectory:
    """Rewrite node data for a new parameter with d(old)/d(new) = rate.

    First-order states keep their values and get derivatives scaled by the
    rate. Second-order states (q, v) become (q, rate v) with acceleration
    rate^2 a + rate slope v, slope being d(rate)/d(old).
    """
    rates_col = rates[:, None]
    if traj.order == 2:
        n = traj.config_dim
        q, v = traj.states[:, :n], traj.states[:, n:]
        a = traj.derivatives[:, n:]
        v_new = rates_col * v
        a_new = rates_col ** 2 * a + (rates * slopes)[:, None] * v
        states = np.hstack([q, v_new])
        derivatives = np.hstack([v_new, a_new])
    else:
        states = traj.states.copy()
        derivatives = rates_col * traj.derivatives
    return Trajectory(
        label=label,
        params=new_params,
        states=states,
        derivatives=derivatives,
        order=traj.order,
        truncated=traj.truncated,
        truncation_reason=traj.truncation_reason,
        stats=traj.stats,
        aux={"rate": rates, "lambda": slopes, "source_params": traj.params.copy()},
    )


def reparametrize(traj: Trajectory, f: ScalarField, label: str = LABEL_TAU, tol: float = DEFAULT_ATOL) -> Trajectory:
    """Sundman reparametrization dt = f dtau of a sampled curve.

    The point set is unchanged; d(gamma)/dtau = f * d(gamma)/dt, so a curve
    integrating X becomes a curve integrating fX. `aux['lambda']` holds
    d log f / dtau at the nodes.
    """
    sl, full_state = _factor_input(traj, f)
    tmap = time_map(traj, f, label=label, tol=tol)
    rates = np.array([f(state[sl]) for state in traj.states])
    if full_state:
        moving = traj.derivatives
    else:
        moving = traj.velocities
    slopes = np.array([f.gradient(state[sl]) @ d for state, d in zip(traj.states, moving)])
    return _retime(traj, tmap.target, rates, slopes, label)


def reparametrize_by(
    traj: Trajectory,
    rate: Callable[[float], float],
    label: str = LABEL_TAU,
    rate_slope: Optional[Callable[[float], float]] = None,
    tol: float = DEFAULT_ATOL,
) -> Trajectory:
    """Reparametrize by a positive rate given along the old parameter, d(old)/d(new) = rate(old).

    lambda = (1/rate) d(rate)/d(new) equals d(rate)/d(old), stored in aux.
    """
    def slope_fd(s):
        h = 1e-6 * max(1.0, abs(s))
        return (rate(s + h) - rate(s - h)) / (2 * h)

    slope = rate_slope or slope_fd
    rates = np.array([float(rate(s)) for s in traj.params])
    if not np.all(rates > 0):
        bad = int(np.argmin(rates))
        raise DomainViolationError(f"nonpositive rate {rates[bad]:.6g}", traj.states[bad])
    new_params = cumulative_quadrature(traj, lambda s: 1.0 / float(rate(s)), tol)
    slopes = np.array([float(slope(s)) for s in traj.params])
    return _retime(traj, new_params, rates, slopes, label)


# ---------------------------------------------------------------------------
# Orbit comparison
# ---------------------------------------------------------------------------

def orbit_distance(a: Trajectory, b: Trajectory) -> float:
    """Symmetric Hausdorff distance between the point sets of two curves.

    Node-to-node distances are refined by projecting each node onto the
    dense output of the other curve, over every interval touching a node
    within the raw distance (so the seam of a closed orbit is covered too).
    """
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("orbit distance of an empty trajectory")
    if a.dim != b.dim:
        raise DimensionMismatchError(f"state dimensions differ: {a.dim} vs {b.dim}")
    return max(_directed_distance(a, b), _directed_distance(b, a))


def _directed_distance(a: Trajectory, b: Trajectory) -> float:
    tree = cKDTree(b.states)
    dists, _ = tree.query(a.states)
    if len(b) < 2:
        return float(np.max(dists))
    spline = b.interpolant
    velocity, acceleration = spline.derivative(1), spline.derivative(2)
    last = len(b) - 1
    worst = 0.0
    for point, d in zip(a.states, dists):
        if d <= worst:
            continue
        near = tree.query_ball_point(point, d * (1.0 + 1e-9) + 1e-15)
        intervals = sorted({k for j in near for k in (j - 1, j) if 0 <= k < last})
        for k in intervals:
            d = min(d, _interval_distance(spline, velocity, acceleration, point, b.params[k], b.params[k + 1]))
            if d <= worst:
                break
        worst = max(worst, d)
    return worst


def _interval_distance(spline, velocity, acceleration, point: np.ndarray, lo: float, hi: float) -> float:
    """Distance from point to the dense output over [lo, hi]: bounded search, then Newton on the foot."""
    def squared(s):
        return float(np.sum((np.asarray(spline(s)) - point) ** 2))

    res = minimize_scalar(squared, bounds=(lo, hi), method="bounded", options={"xatol": 1e-14 * max(1.0, abs(hi))})
    s, best = float(res.x), float(res.fun)
    # the bounded search stops at a relative parameter tolerance near sqrt(eps)
    for _ in range(4):
        r = np.asarray(spline(s)) - point
        v = np.asarray(velocity(s))
        slope = float(r @ v)
        curvature = float(v @ v + r @ np.asarray(acceleration(s)))
        if curvature <= 0.0:
            break
        s_next = float(np.clip(s - slope / curvature, lo, hi))
        value = squared(s_next)
        if value >= best:
            break
        s, best = s_next, value
    return float(np.sqrt(max(best, 0.0)))


# ---------------------------------------------------------------------------
# Brackets, divergence, first integrals
# ---------------------------------------------------------------------------

def lie_bracket(X: VectorField, Y: VectorField, q) -> np.ndarray:
    """[X, Y](q) = (DY) X - (DX) Y."""
    if X.dim != Y.dim:
        raise DimensionMismatchError(f"bracket of fields of dimensions {X.dim} and {Y.dim}")
    q = as_point(q, X.dim)
    return Y.jacobian_at(q) @ X(q) - X.jacobian_at(q) @ Y(q)


def divergence(X: VectorField, omega: VolumeForm, q) -> float:
    """div_Omega X with L_X Omega = div(X) Omega, Omega = rho dq."""
    if X.dim != omega.dim:
        raise DimensionMismatchError(f"field dimension {X.dim} vs volume form dimension {omega.dim}")
    q = as_point(q, X.dim)
    rho = float(omega.density.func(q))
    if not rho > 0:
        raise DomainViolationError(f"nonpositive volume density {rho:.6g}", q)
    return float(np.trace(X.jacobian_at(q)) + omega.density.gradient(q) @ X(q) / rho)


def first_integral_residual(F: ScalarField, X: VectorField, samples) -> float:
    """max |grad F . X| over the samples; zero iff F is a first integral there."""
    if F.dim != X.dim:
        raise DimensionMismatchError(f"function dimension {F.dim} vs field dimension {X.dim}")
    pts = as_samples(samples, X.dim)
    return float(max(abs(F.gradient(q) @ X(q)) for q in pts))


@dataclass(frozen=True, eq=False)
class SundmanOrbitReport:
    distance: float
    first_integral_drift: Optional[float]
    round_trip_error: float
    tau_end: float
    original: Trajectory
    rescaled: Trajectory


def sundman_orbit_check(
    X: VectorField,
    f: ScalarField,
    q0,
    T: float,
    opts: Optional[IntegratorOptions] = None,
    first_integral: Optional[ScalarField] = None,
) -> SundmanOrbitReport:
    """Compare the orbit of X over [0, T] with the orbit of fX over the matching tau span."""
    opts = opts or IntegratorOptions()
    original = integrate_flow(X, q0, T, opts)
    tmap = time_map(original, f, tol=opts.atol)
    tau_end = float(tmap.target[-1])
    rescaled = integrate_flow(scale_field(X, f), q0, tau_end, opts, label=LABEL_TAU)

    drift = None
    if first_integral is not None:
        values = np.array([first_integral(state) for state in rescaled.states])
        drift = float(np.max(np.abs(values - values[0])))

    there = reparametrize(original, f, tol=opts.atol)
    back = reparametrize(there, f.reciprocal(), label=LABEL_T, tol=opts.atol)
    round_trip = float(np.max(np.abs(back.params - original.params)))

    report = SundmanOrbitReport(
        distance=orbit_distance(original, rescaled),
        first_integral_drift=drift,
        round_trip_error=round_trip,
        tau_end=tau_end,
        original=original,
        rescaled=rescaled,
    )
    logger.info(
        "sundman orbit check: distance %.3e, round trip %.3e, tau_end %.6g",
        report.distance, report.round_trip_error, tau_end,
    )
    return report


# ---------------------------------------------------------------------------
# Pointwise collinearity fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FactorEstimate:
    """Least-squares scalar c(q) with target(q) ~ c(q) X(q), sample by sample.

    `field` evaluates the same fit at arbitrary points; `skipped` lists the
    sample indices where X vanished.
    """

    samples: np.ndarray
    values: np.ndarray
    residual: float
    skipped: Tuple[int, ...]
    field: ScalarField

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def constant(self, tol: float = 1e-8) -> Optional[float]:
        """The common value when the fit is constant over the samples, else None."""
        mean = float(np.mean(self.values))
        if np.max(np.abs(self.values - mean)) <= tol * max(1.0, abs(mean)):
            return mean
        return None


def collinear_factor(
    target: Callable[[np.ndarray], np.ndarray],
    X: VectorField,
    samples,
    name: str = "h",
) -> FactorEstimate:
    """Fit target(q) = c(q) X(q) at each sample; the residual is max |target - c X|."""
    pts = as_samples(samples, X.dim)

    def fit(q):
        x = X(q)
        norm2 = float(x @ x)
        if norm2 <= VANISHING_NORM ** 2:
            raise DomainViolationError(f"field vanishes, {name} undefined", q)
        b = np.asarray(target(q), dtype=float)
        c = float(b @ x) / norm2
        return c, float(np.linalg.norm(b - c * x))

    used, values, residuals, skipped = [], [], [], []
    for i, q in enumerate(pts):
        try:
            c, r = fit(q)
        except DomainViolationError:
            skipped.append(i)
            continue
        used.append(q)
        values.append(c)
        residuals.append(r)
    if skipped:
        logger.warning("%d of %d samples skipped: %s vanishes there", len(skipped), len(pts), X.name or "field")
    if not used:
        raise InvalidInputError(f"{X.name or 'field'} vanishes at every sample")
    return FactorEstimate(
        samples=np.array(used),
        values=np.array(values),
        residual=float(max(residuals)),
        skipped=tuple(skipped),
        field=ScalarField(dim=X.dim, func=lambda q: fit(q)[0], name=name),
    )
