"""
Declarative scenarios: parsing, compilation and execution.

A scenario file is a JSON object validated against data/scenario.schema.json.
Top-level system entries are defaults shared by every case; each case may
override them. Every requested check is matched against the metrics its
kind provides before anything is integrated, and output files are written
only after every check has been evaluated.
"""
import json
import logging
import time
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Mapping, Optional, Tuple

import numpy as np
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from src.apps.expressions import ExpressionCompiler, coordinates_for, locate
from src.apps.reporting import CheckResult, Report, write_json, write_trajectory_csv
from src.core.fields import (
    LABEL_S,
    LABEL_TAU,
    IntegratorOptions,
    ScalarField,
    Trajectory,
    VectorField,
    VolumeForm,
    as_point,
    divergence,
    first_integral_residual,
    integrate_flow,
    integrate_sode,
    reparametrize,
    reparametrize_by,
    scale_field,
    sundman_orbit_check,
)
from src.core.kepler import KeplerParams, linearization_check
from src.core.linstruct import (
    affinity_residual,
    certify_linearizable,
    conformal_eigen_factor,
    linearity_residual,
    linearized_bracket_residual,
)
from src.core.mechanics import (
    MechanicalSystem,
    conformal_mechanical_residual,
    energy_constancy_residual,
    energy_drift,
    gradient_identity_residual,
    jacobi_equivalence,
    jacobi_metric,
    mechanical_sode,
    newtonian_sode,
    nabla_force_residual,
    reparametrized_mechanical_residual,
    rescale_to_energy,
    sundman_newton_residual,
)
from src.core.riemann import (
    ConformalFactor,
    MetricField,
    arc_length,
    autoparallel_residual,
    christoffel,
    conformal_christoffel,
    conformal_nabla_residual,
    fitted_lambda,
    geodesic_field,
    geodesic_rescaling,
    geodesic_residual,
    killing_residual,
    metric_compatibility_residual,
    pregeodesic_factor,
    reparametrized_geodesic_residual,
    speed_drift,
    torsion_residual,
)
from src.core.sampling import annulus_samples, box_samples, circle_samples
from src.utils.error_handler import InvalidInputError, ScenarioError
from src.utils.settings import DEFAULT_ANNULUS, DEFAULT_SAMPLE_COUNT, DEFAULT_SEED

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
SCHEMA_PATH = DATA_DIR / "scenario.schema.json"
BUILTIN_DIR = DATA_DIR / "scenarios"

KINDS = ("flow", "sundman", "geodesic", "conformal", "mechanical", "newtonian", "jacobi", "kepler", "linstruct")

# Keys that describe the scenario rather than the system of a case
SCENARIO_KEYS = ("name", "kind", "description", "seed", "cases")

MAIN_CASE = "main"

# d(old)/d(new) of the affine retiming used by the affine-parameter checks
AFFINE_RATE = 2.0


@dataclass(frozen=True, eq=False)
class Case:
    name: str
    kind: str
    dim: int
    data: Mapping[str, Any]
    system: Mapping[str, Any]
    checks: Mapping[str, Tuple[float, str]]
    options: IntegratorOptions


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    kind: str
    description: str
    seed: int
    cases: Tuple[Case, ...]
    source: Optional[str] = None

    @property
    def dim(self) -> int:
        return self.cases[0].dim


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def _validator() -> Draft202012Validator:
    with open(SCHEMA_PATH, "r", encoding="utf-8") as handle:
        return Draft202012Validator(json.load(handle))


def _schema_error(error, text: str) -> ScenarioError:
    path = [str(part) for part in error.absolute_path]
    where = "/".join(path) or "<root>"
    keys = [part for part in error.absolute_path if isinstance(part, str)]
    line, column = locate(text, f'"{keys[-1]}"') if keys else (None, None)
    return ScenarioError(f"invalid scenario at {where}: {error.message}", line, column)


def parse_scenario(text: str, source: Optional[str] = None) -> Scenario:
    """Validate scenario text and compile every case into numerical fields."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed scenario: {exc.msg}", exc.lineno, exc.colno) from None
    error = best_match(_validator().iter_errors(data))
    if error is not None:
        raise _schema_error(error, text)

    defaults = {key: value for key, value in data.items() if key not in SCENARIO_KEYS}
    entries = data.get("cases") or [{"name": MAIN_CASE}]
    names = [entry.get("name", MAIN_CASE) for entry in entries]
    if len(set(names)) != len(names):
        raise ScenarioError(f"duplicate case names in {data['name']!r}: {names}")

    cases = []
    for name, entry in zip(names, entries):
        merged = dict(defaults)
        merged.update({key: value for key, value in entry.items() if key != "name"})
        kind = merged.pop("kind", data["kind"])
        cases.append(_compile_case(name, kind, merged, text))

    scenario = Scenario(
        name=data["name"],
        kind=data["kind"],
        description=data.get("description", ""),
        seed=int(data.get("seed", DEFAULT_SEED)),
        cases=tuple(cases),
        source=source,
    )
    logger.debug("parsed scenario %s with %d case(s)", scenario.name, len(cases))
    return scenario


def load_scenario_file(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InvalidInputError(f"scenario file not found: {path}") from None
    except OSError as exc:
        raise InvalidInputError(f"cannot read scenario file {path}: {exc.strerror}") from None
    return parse_scenario(text, source=str(path))


def builtin_names() -> List[str]:
    return sorted(path.stem for path in BUILTIN_DIR.glob("*.json"))


def builtin_path(name: str) -> Path:
    path = BUILTIN_DIR / f"{name}.json"
    if not path.is_file():
        raise InvalidInputError(f"unknown built-in scenario {name!r} (see list-builtins)")
    return path


def load_builtin(name: str) -> Scenario:
    return load_scenario_file(builtin_path(name))


def _tuple_length(text: str) -> int:
    inner = text.strip()
    if inner.startswith("(") and inner.endswith(")"):
        inner = inner[1:-1]
    depth, count = 0, 1
    for char in inner:
        if char in "([":
            depth += 1
        elif char in ")]":
            depth -= 1
        elif char == "," and depth == 0:
            count += 1
    return count


def _dimension(kind: str, data: Mapping[str, Any]) -> int:
    if "coordinates" in data:
        return len(data["coordinates"])
    for key in ("field", "metric", "force"):
        if key in data:
            value = data[key]
            return _tuple_length(value) if isinstance(value, str) else len(value)
    if "q" in data.get("initial", {}):
        return len(data["initial"]["q"])
    if kind == "kepler":
        return 1
    raise ScenarioError("cannot infer the dimension; list the 'coordinates'")


def _has(data: Mapping[str, Any], path: str) -> bool:
    node: Any = data
    for part in path.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return False
        node = node[part]
    return True


def _parse_checks(raw: Mapping[str, Any]) -> Dict[str, Tuple[float, str]]:
    checks = {}
    for name, limit in raw.items():
        if isinstance(limit, Mapping):
            mode = "max" if "max" in limit else "min"
            checks[name] = (float(limit[mode]), mode)
        else:
            checks[name] = (float(limit), "max")
    return checks


def _guard(compiler: ExpressionCompiler, sources):
    if sources is None:
        return None
    predicates = [compiler.guard(s) for s in ([sources] if isinstance(sources, str) else sources)]
    return lambda q: all(p(q) for p in predicates)


def _point(values, dim: int, what: str) -> np.ndarray:
    if len(values) != dim:
        raise ScenarioError(f"{what} has {len(values)} components, expected {dim}")
    return np.asarray(values, dtype=float)


def _compile_case(name: str, kind: str, data: Dict[str, Any], text: str) -> Case:
    label = name if name == MAIN_CASE else f"case {name!r}"
    runner = RUNNERS[kind]
    checks = _parse_checks(data.get("checks", {}))
    if not checks:
        raise ScenarioError(f"{label} requests no checks")
    for check in checks:
        if check not in runner.METRICS:
            line, column = locate(text, f'"{check}"')
            raise ScenarioError(f"unknown check {check!r} for kind {kind!r}", line, column)
        for requirement in runner.METRICS[check]:
            if not any(_has(data, option) for option in requirement.split("|")):
                raise ScenarioError(f"check {check!r} in {label} needs {requirement!r}")

    dim = _dimension(kind, data)
    compiler = ExpressionCompiler(coordinates_for(dim, data.get("coordinates")), data.get("params"), text)
    guard = _guard(compiler, data.get("guard"))

    system: Dict[str, Any] = {}
    for key in ("field", "second_field", "third_field"):
        if key in data:
            system[key] = compiler.vector(data[key], name=key, guard=guard)
    if "factor" in data:
        system["factor"] = compiler.scalar(data["factor"], name="f", positive=True, guard=guard)
    if "first_integral" in data:
        system["first_integral"] = compiler.scalar(data["first_integral"], name="F", guard=guard)
    if "density" in data:
        system["volume"] = VolumeForm(dim, compiler.scalar(data["density"], name="rho", positive=True))
    if "metric" in data:
        system["metric"] = compiler.metric(data["metric"], guard=guard)
    if "phi" in data:
        system["phi"] = ConformalFactor(compiler.scalar(data["phi"], name="phi", guard=guard))
        if "metric" in data:
            system["conformal_metric"] = compiler.conformal_metric(data["metric"], data["phi"], guard=guard)
    if "potential" in data:
        system["potential"] = compiler.scalar(data["potential"], name="V", guard=guard)
    if "force" in data:
        system["force"] = compiler.force(data["force"], name="Z")
    if "rate" in data:
        system["rate"] = compiler.rate(data["rate"])
    if "kepler" in data:
        system["kepler"] = KeplerParams(**{key: float(value) for key, value in data["kepler"].items()})

    initial = data.get("initial")
    if initial is not None:
        system["q0"] = _point(initial["q"], dim, "initial position")
        if "v" in initial:
            system["v0"] = _point(initial["v"], dim, "initial velocity")
            if "energy" in data and "metric" in system and "potential" in system:
                mech = MechanicalSystem(system["metric"], system["potential"])
                system["v0"] = rescale_to_energy(mech, system["q0"], system["v0"], float(data["energy"]))

    return Case(
        name=name,
        kind=kind,
        dim=dim,
        data=data,
        system=system,
        checks=checks,
        options=IntegratorOptions(**data.get("integrator", {})),
    )


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def generate_samples(options: Mapping[str, Any], dim: int, seed: int) -> np.ndarray:
    kind = options.get("kind", "annulus")
    count = int(options.get("count", DEFAULT_SAMPLE_COUNT))
    if kind == "annulus":
        return annulus_samples(dim, count, tuple(options.get("radii", DEFAULT_ANNULUS)), seed)
    if kind == "box":
        lower, upper = options["lower"], options["upper"]
        if len(lower) != dim or len(upper) != dim:
            raise ScenarioError(f"sample box corners need {dim} components")
        return box_samples(lower, upper, count, seed)
    if dim != 2:
        raise ScenarioError("circle samples are planar")
    return circle_samples(float(options.get("radius", 1.0)), count, seed)


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------

def _final_error(traj: Trajectory, expected) -> float:
    if traj.truncated:
        return float("inf")
    target = np.asarray(expected, dtype=float)
    state = traj.states[-1]
    if target.size == traj.config_dim:
        state = state[: traj.config_dim]
    elif target.size != traj.dim:
        raise ScenarioError(f"expected final state has {target.size} components, trajectory has {traj.dim}")
    return float(np.linalg.norm(state - target))


class CaseRunner:
    """Lazily evaluated metrics of one case.

    METRICS maps each metric to the scenario entries it needs; alternatives
    are written "a|b". A metric named m is computed by `metric_m`.
    """

    kind: ClassVar[str] = ""
    METRICS: ClassVar[Dict[str, Tuple[str, ...]]] = {}
    CURVES: ClassVar[Tuple[str, ...]] = ()

    def __init__(self, case: Case, seed: int):
        self.case = case
        self.seed = seed
        self.opts = case.options
        self.system = case.system

    def evaluate(self, name: str) -> float:
        value = float(getattr(self, f"metric_{name}")())
        logger.debug("%s.%s = %.6e", self.case.name, name, value)
        return value

    @cached_property
    def samples(self) -> np.ndarray:
        return generate_samples(self.case.data.get("samples", {}), self.case.dim, self.seed)

    @property
    def horizon(self) -> float:
        return float(self.case.data["horizon"])

    def expected(self, key: str):
        return self.case.data["expected"][key]

    def curves(self) -> Dict[str, Trajectory]:
        # only the curves that some evaluated metric integrated
        return {name: self.__dict__[name] for name in self.CURVES if name in self.__dict__}

    def stats(self) -> Dict[str, int]:
        out = {}
        for name, traj in self.curves().items():
            for key, value in traj.stats.items():
                out[f"{name}_{key}"] = int(value)
        return out


class FlowRunner(CaseRunner):
    kind = "flow"
    METRICS = {
        "final_error": ("field", "initial", "horizon", "expected.final"),
        "return_error": ("field", "initial", "horizon"),
        "first_integral_drift": ("field", "initial", "horizon", "first_integral"),
        "first_integral_residual": ("field", "first_integral"),
        "divergence": ("field",),
        "scaled_divergence": ("field", "factor"),
        "product_rule_residual": ("field", "factor"),
        "jacobian_error": ("field",),
    }
    CURVES = ("flow",)

    @cached_property
    def flow(self) -> Trajectory:
        return integrate_flow(self.system["field"], self.system["q0"], self.horizon, self.opts)

    @property
    def volume(self) -> VolumeForm:
        return self.system.get("volume") or VolumeForm.euclidean(self.case.dim)

    def metric_final_error(self):
        return _final_error(self.flow, self.expected("final"))

    def metric_return_error(self):
        return _final_error(self.flow, self.system["q0"])

    def metric_first_integral_drift(self):
        F = self.system["first_integral"]
        values = np.array([F(q) for q in self.flow.states])
        return np.max(np.abs(values - values[0]))

    def metric_first_integral_residual(self):
        return first_integral_residual(self.system["first_integral"], self.system["field"], self.samples)

    def metric_divergence(self):
        X = self.system["field"]
        return max(abs(divergence(X, self.volume, q)) for q in self.samples)

    def metric_scaled_divergence(self):
        fX = scale_field(self.system["field"], self.system["factor"])
        return max(abs(divergence(fX, self.volume, q)) for q in self.samples)

    def metric_product_rule_residual(self):
        """div(fX) by finite differences against f div X + X(f)."""
        X, f = self.system["field"], self.system["factor"]
        numeric = VectorField(dim=X.dim, func=scale_field(X, f).func, name="fX")
        worst = 0.0
        for q in self.samples:
            expected = f(q) * divergence(X, self.volume, q) + f.gradient(q) @ X(q)
            worst = max(worst, abs(divergence(numeric, self.volume, q) - expected))
        return worst

    def metric_jacobian_error(self):
        X = self.system["field"]
        return max(X.jacobian_error(q) for q in self.samples)


class SundmanRunner(CaseRunner):
    kind = "sundman"
    METRICS = {
        "orbit_distance": ("field", "factor", "initial", "horizon"),
        "first_integral_drift": ("field", "factor", "initial", "horizon", "first_integral"),
        "round_trip_error": ("field", "factor", "initial", "horizon"),
        "first_integral_residual": ("field", "factor", "first_integral"),
    }

    @cached_property
    def report(self):
        return sundman_orbit_check(
            self.system["field"],
            self.system["factor"],
            self.system["q0"],
            self.horizon,
            self.opts,
            first_integral=self.system.get("first_integral"),
        )

    def curves(self):
        if "report" not in self.__dict__:
            return {}
        return {"original": self.report.original, "rescaled": self.report.rescaled}

    def metric_orbit_distance(self):
        return self.report.distance

    def metric_first_integral_drift(self):
        return self.report.first_integral_drift

    def metric_round_trip_error(self):
        return self.report.round_trip_error

    def metric_first_integral_residual(self):
        fX = scale_field(self.system["field"], self.system["factor"])
        return first_integral_residual(self.system["first_integral"], fX, self.samples)


class LinstructRunner(CaseRunner):
    kind = "linstruct"
    METRICS = {
        "linearity_residual": ("field",),
        "affinity_residual": ("field",),
        "eigen_residual": ("field",),
        "eigen_factor_error": ("field", "expected.eigen_factor"),
        "linearized_bracket_residual": ("field",),
    }

    @cached_property
    def eigen(self):
        return conformal_eigen_factor(self.system["field"], self.samples)

    def metric_linearity_residual(self):
        return linearity_residual(self.system["field"], self.samples)

    def metric_affinity_residual(self):
        return affinity_residual(self.system["field"], self.samples)

    def metric_eigen_residual(self):
        return self.eigen.residual

    def metric_eigen_factor_error(self):
        return np.max(np.abs(self.eigen.values - float(self.expected("eigen_factor"))))

    def metric_linearized_bracket_residual(self):
        X = self.system["field"]
        f = certify_linearizable(X, self.samples)
        if f is None:
            return float("inf")
        return linearized_bracket_residual(X, f, self.samples)


GEODESIC_DATA = ("metric", "initial.v", "horizon")


class GeodesicRunner(CaseRunner):
    kind = "geodesic"
    METRICS = {
        "christoffel_error": ("metric", "expected.christoffel"),
        "christoffel_fd_error": ("metric", "expected.christoffel"),
        "speed_drift": GEODESIC_DATA,
        "geodesic_residual": GEODESIC_DATA,
        "affine_lambda": GEODESIC_DATA,
        "affine_geodesic_residual": GEODESIC_DATA,
        "sundman_geodesic_residual": GEODESIC_DATA + ("factor",),
        "sundman_lambda_error": GEODESIC_DATA + ("factor",),
        "rate_geodesic_residual": GEODESIC_DATA + ("rate",),
        "arc_length_error": GEODESIC_DATA + ("expected.arc_length",),
        "killing_residual": ("metric", "field"),
        "autoparallel_residual": ("metric", "field"),
        "length_variation": ("metric", "field"),
        "pregeodesic_residual": ("metric", "field"),
        "pregeodesic_factor_error": ("metric", "field", "expected.pregeodesic_factor"),
        "rescaled_autoparallel": ("metric", "field", "factor", "initial", "horizon"),
        "metric_compatibility_residual": ("metric", "field", "second_field", "third_field"),
        "torsion_residual": ("metric", "field", "second_field"),
    }
    CURVES = ("geodesic", "affine", "sundman", "retimed")

    @property
    def g(self) -> MetricField:
        return self.system["metric"]

    @cached_property
    def geodesic(self) -> Trajectory:
        return integrate_sode(geodesic_field(self.g), self.system["q0"], self.system["v0"], self.horizon, self.opts)

    @cached_property
    def affine(self) -> Trajectory:
        return reparametrize_by(
            self.geodesic, lambda s: AFFINE_RATE, label=LABEL_S, rate_slope=lambda s: 0.0, tol=self.opts.atol
        )

    @cached_property
    def sundman(self) -> Trajectory:
        return reparametrize(self.geodesic, self.system["factor"], label=LABEL_TAU, tol=self.opts.atol)

    @cached_property
    def retimed(self) -> Trajectory:
        rate, slope = self.system["rate"]
        return reparametrize_by(self.geodesic, rate, label=LABEL_TAU, rate_slope=slope, tol=self.opts.atol)

    @cached_property
    def rescaling(self):
        return geodesic_rescaling(
            self.g, self.system["field"], self.system["factor"], self.system["q0"], self.horizon, self.opts
        )

    def curves(self):
        out = super().curves()
        if "rescaling" in self.__dict__:
            out["pregeodesic"] = self.rescaling.trajectory
        return out

    def _christoffel_reference(self) -> Tuple[np.ndarray, np.ndarray]:
        entry = self.expected("christoffel")
        n = self.case.dim
        point = as_point(entry["point"], n)
        compiler = ExpressionCompiler(coordinates_for(n, self.case.data.get("coordinates")), self.case.data.get("params"))
        reference = np.zeros((n, n, n))
        for key, value in entry["values"].items():
            try:
                i, j, k = (int(part) - 1 for part in key.split(","))
            except ValueError:
                raise ScenarioError(f"Christoffel index {key!r} is not of the form 'i,j,k'") from None
            if not all(0 <= index < n for index in (i, j, k)):
                raise ScenarioError(f"Christoffel index {key!r} out of range for dimension {n}")
            reference[i, j, k] = reference[i, k, j] = compiler.scalar(value).func(point)
        return point, reference

    def metric_christoffel_error(self):
        point, reference = self._christoffel_reference()
        return np.max(np.abs(christoffel(self.g, point) - reference))

    def metric_christoffel_fd_error(self):
        point, reference = self._christoffel_reference()
        return np.max(np.abs(christoffel(replace(self.g, partials=None), point) - reference))

    def metric_speed_drift(self):
        return speed_drift(self.g, self.geodesic)

    def metric_geodesic_residual(self):
        return geodesic_residual(self.g, self.geodesic)

    def metric_affine_lambda(self):
        return np.max(np.abs(fitted_lambda(self.g, self.affine)))

    def metric_affine_geodesic_residual(self):
        return reparametrized_geodesic_residual(self.g, self.affine)

    def metric_sundman_geodesic_residual(self):
        return reparametrized_geodesic_residual(self.g, self.sundman)

    def metric_sundman_lambda_error(self):
        carried = np.asarray(self.sundman.aux["lambda"])[1:-1]
        return np.max(np.abs(fitted_lambda(self.g, self.sundman) - carried))

    def metric_rate_geodesic_residual(self):
        return reparametrized_geodesic_residual(self.g, self.retimed)

    def metric_arc_length_error(self):
        return abs(arc_length(self.g, self.geodesic, tol=self.opts.atol) - float(self.expected("arc_length")))

    def metric_killing_residual(self):
        return max(killing_residual(self.g, self.system["field"], q) for q in self.samples)

    def metric_autoparallel_residual(self):
        return max(autoparallel_residual(self.g, self.system["field"], q) for q in self.samples)

    def metric_length_variation(self):
        X = self.system["field"]
        lengths = np.array([self.g.inner(q, X(q), X(q)) for q in self.samples])
        return np.max(lengths) - np.min(lengths)

    def metric_pregeodesic_residual(self):
        return pregeodesic_factor(self.g, self.system["field"], self.samples).residual

    def metric_pregeodesic_factor_error(self):
        estimate = pregeodesic_factor(self.g, self.system["field"], self.samples)
        return np.max(np.abs(estimate.values - float(self.expected("pregeodesic_factor"))))

    def metric_rescaled_autoparallel(self):
        rescaled = self.rescaling.rescaled(self.system["field"])
        nodes = self.rescaling.trajectory.positions[1:-1]
        stride = max(1, len(nodes) // 20)
        return max(autoparallel_residual(self.g, rescaled, q) for q in nodes[::stride])

    def metric_metric_compatibility_residual(self):
        s = self.system
        return metric_compatibility_residual(self.g, s["field"], s["second_field"], s["third_field"], self.samples)

    def metric_torsion_residual(self):
        return torsion_residual(self.g, self.system["field"], self.system["second_field"], self.samples)


class ConformalRunner(CaseRunner):
    kind = "conformal"
    METRICS = {
        "conformal_christoffel_error": ("metric", "phi"),
        "conformal_nabla_residual": ("metric", "phi", "field", "second_field"),
        "conformal_geodesic_residual": ("metric", "phi", "initial.v", "horizon"),
    }
    CURVES = ("conformal_geodesic",)

    @cached_property
    def conformal_geodesic(self) -> Trajectory:
        g_bar = self.system["conformal_metric"]
        return integrate_sode(geodesic_field(g_bar), self.system["q0"], self.system["v0"], self.horizon, self.opts)

    def metric_conformal_christoffel_error(self):
        g, phi, g_bar = self.system["metric"], self.system["phi"], self.system["conformal_metric"]
        return max(np.max(np.abs(conformal_christoffel(g, phi, q) - christoffel(g_bar, q))) for q in self.samples)

    def metric_conformal_nabla_residual(self):
        s = self.system
        return conformal_nabla_residual(s["metric"], s["phi"], s["field"], s["second_field"], self.samples)

    def metric_conformal_geodesic_residual(self):
        zero = ScalarField.constant(0.0, self.case.dim, name="0")
        return conformal_mechanical_residual(self.system["metric"], self.system["phi"], zero, self.conformal_geodesic)


MOTION_DATA = ("metric", "potential", "initial.v", "horizon")


class MechanicalRunner(CaseRunner):
    kind = "mechanical"
    METRICS = {
        "energy_drift": MOTION_DATA,
        "reparametrized_residual": MOTION_DATA + ("rate|factor",),
        "conformal_residual": MOTION_DATA + ("phi",),
        "energy_constancy_residual": ("metric", "potential", "field"),
        "gradient_identity_residual": ("metric", "potential", "energy"),
        "jacobi_pregeodesic_residual": ("metric", "potential", "energy", "field"),
    }
    CURVES = ("motion", "retimed", "conformal_motion")

    @cached_property
    def mechanical_system(self) -> MechanicalSystem:
        return MechanicalSystem(self.system["metric"], self.system["potential"], name=self.case.name)

    @property
    def E0(self) -> float:
        return float(self.case.data["energy"])

    @cached_property
    def motion(self) -> Trajectory:
        return integrate_sode(
            mechanical_sode(self.mechanical_system), self.system["q0"], self.system["v0"], self.horizon, self.opts
        )

    @cached_property
    def retimed(self) -> Trajectory:
        if "rate" in self.system:
            rate, slope = self.system["rate"]
            return reparametrize_by(self.motion, rate, label=LABEL_TAU, rate_slope=slope, tol=self.opts.atol)
        return reparametrize(self.motion, self.system["factor"], label=LABEL_TAU, tol=self.opts.atol)

    @cached_property
    def conformal_motion(self) -> Trajectory:
        scaled = MechanicalSystem(self.system["conformal_metric"], self.system["potential"])
        return integrate_sode(mechanical_sode(scaled), self.system["q0"], self.system["v0"], self.horizon, self.opts)

    def metric_energy_drift(self):
        return energy_drift(self.mechanical_system, self.motion)

    def metric_reparametrized_residual(self):
        return reparametrized_mechanical_residual(self.mechanical_system, self.retimed)

    def metric_conformal_residual(self):
        s = self.system
        return conformal_mechanical_residual(s["metric"], s["phi"], s["potential"], self.conformal_motion)

    def metric_energy_constancy_residual(self):
        return energy_constancy_residual(self.mechanical_system, self.system["field"], self.samples)

    def metric_gradient_identity_residual(self):
        return gradient_identity_residual(self.mechanical_system, self.E0, self.samples)

    def metric_jacobi_pregeodesic_residual(self):
        jacobi = jacobi_metric(self.mechanical_system, self.E0)
        return pregeodesic_factor(jacobi.metric, self.system["field"], self.samples).residual


JACOBI_DATA = ("metric", "potential", "energy", "initial.v", "horizon")


class JacobiRunner(MechanicalRunner):
    kind = "jacobi"
    METRICS = {
        "orbit_distance": JACOBI_DATA,
        "parametrized_deviation": JACOBI_DATA,
        "arc_length_mismatch": JACOBI_DATA,
        "energy_drift": JACOBI_DATA,
        "gradient_identity_residual": ("metric", "potential", "energy"),
        "jacobi_pregeodesic_residual": ("metric", "potential", "energy", "field"),
    }

    @cached_property
    def report(self):
        return jacobi_equivalence(
            self.mechanical_system, self.E0, self.system["q0"], self.system["v0"], self.horizon, self.opts
        )

    def curves(self):
        if "report" not in self.__dict__:
            return {}
        return {"mechanical": self.report.mechanical, "geodesic": self.report.geodesic}

    def _compared(self, name: str) -> float:
        # a truncated comparison covers less than the requested horizon
        if self.report.truncated:
            return float("inf")
        return self.report.metrics()[name]

    def metric_orbit_distance(self):
        return self._compared("orbit_distance")

    def metric_parametrized_deviation(self):
        return self._compared("parametrized_deviation")

    def metric_arc_length_mismatch(self):
        return self._compared("arc_length_mismatch")

    def metric_energy_drift(self):
        return self._compared("energy_drift")


class NewtonianRunner(CaseRunner):
    kind = "newtonian"
    METRICS = {
        "nabla_force_residual": ("metric", "force", "field"),
        "sundman_newton_residual": ("metric", "force", "field", "factor"),
        "final_error": ("metric", "force", "initial.v", "horizon", "expected.final"),
    }
    CURVES = ("motion",)

    @cached_property
    def motion(self) -> Trajectory:
        dynamics = newtonian_sode(self.system["metric"], self.system["force"])
        return integrate_sode(dynamics, self.system["q0"], self.system["v0"], self.horizon, self.opts)

    def metric_nabla_force_residual(self):
        s = self.system
        return nabla_force_residual(s["metric"], s["field"], s["force"], self.samples)

    def metric_sundman_newton_residual(self):
        s = self.system
        Y = scale_field(s["field"], s["factor"])
        return sundman_newton_residual(s["metric"], Y, s["force"], s["factor"], self.samples)

    def metric_final_error(self):
        return _final_error(self.motion, self.expected("final"))


KEPLER_METRICS = (
    "deviation_linear",
    "deviation_analytic",
    "time_law_residual",
    "energy_identity_residual",
    "energy_drift",
    "period_error",
)


class KeplerRunner(CaseRunner):
    kind = "kepler"
    METRICS = {name: ("kepler",) for name in KEPLER_METRICS}

    @cached_property
    def report(self):
        params: KeplerParams = self.system["kepler"]
        if "q0" in self.system:
            r0 = float(self.system["q0"][0])
            rdot0 = float(self.system.get("v0", np.zeros(1))[0])
        else:
            r0, rdot0 = params.perihelion_state()
        periods = float(self.case.data.get("periods", 1.0))
        return linearization_check(params, r0, rdot0, periods, self.opts)

    def curves(self):
        if "report" not in self.__dict__:
            return {}
        return {"radial": self.report.radial, "sundman": self.report.sundman, "linear": self.report.linear}

    def evaluate(self, name: str) -> float:
        # period_error is undefined for circular orbits and then fails its check
        return float(self.report.metrics().get(name, float("nan")))


RUNNERS: Dict[str, type] = {
    runner.kind: runner
    for runner in (
        FlowRunner,
        SundmanRunner,
        LinstructRunner,
        GeodesicRunner,
        ConformalRunner,
        MechanicalRunner,
        JacobiRunner,
        NewtonianRunner,
        KeplerRunner,
    )
}


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def run_scenario(
    scenario: Scenario,
    out_dir=None,
    seed: Optional[int] = None,
    with_runtime: bool = False,
) -> Report:
    """Evaluate every check of every case, then write CSV trajectories and report.json.

    Files go to <out_dir>/<scenario name>/ and nothing is written when a
    check raises.
    """
    seed = scenario.seed if seed is None else int(seed)
    start = time.perf_counter()
    report = Report(scenario=scenario.name, kind=scenario.kind, seed=seed)

    runners = []
    for case in scenario.cases:
        runner = RUNNERS[case.kind](case, seed)
        for name, (limit, mode) in case.checks.items():
            report.checks.append(CheckResult(case.name, name, runner.evaluate(name), limit, mode))
        report.stats[case.name] = runner.stats()
        runners.append(runner)
    report.runtime = time.perf_counter() - start

    if out_dir is not None:
        target = Path(out_dir) / scenario.name
        for runner in runners:
            for curve, traj in runner.curves().items():
                filename = f"{runner.case.name}-{curve}.csv"
                report.files[filename] = write_trajectory_csv(traj, target / filename)
        write_json(report.to_dict(with_runtime=with_runtime), target / "report.json")

    logger.info(
        "scenario %s: %d checks, %d failed, %.2fs",
        scenario.name, len(report.checks), len(report.failures), report.runtime,
    )
    return report
