"""
Compile scenario expression strings into numerical fields.

Expressions are parsed with sympy, checked against the allowed symbols and
functions, differentiated symbolically and turned into numpy callables with
lambdify, so every compiled field carries analytic derivatives.
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from sympy.core.function import AppliedUndef
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

from src.core.fields import ScalarField, VectorField
from src.core.mechanics import ForceField
from src.core.riemann import MetricField
from src.utils.error_handler import ScenarioError

logger = logging.getLogger(__name__)

FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "pi": sp.pi,
}

TRANSFORMATIONS = standard_transformations + (convert_xor,)

# Names the parser's generated code refers to; nothing else is global.
PARSER_GLOBALS = {
    "Symbol": sp.Symbol,
    "Function": sp.Function,
    "Integer": sp.Integer,
    "Float": sp.Float,
    "Rational": sp.Rational,
}

DEFAULT_COORDINATES = {1: ["x"], 2: ["x", "y"], 3: ["x", "y", "z"]}
PARAMETER_SYMBOL = "t"


def locate(text: Optional[str], fragment: str) -> Tuple[Optional[int], Optional[int]]:
    """1-based line and column of the first occurrence of fragment in text."""
    if not text:
        return None, None
    index = text.find(fragment)
    if index < 0:
        return None, None
    line = text.count("\n", 0, index) + 1
    column = index - (text.rfind("\n", 0, index) + 1) + 1
    return line, column


class ExpressionCompiler:
    """Parses expressions over a fixed coordinate list and numeric parameters."""

    def __init__(self, coordinates: Sequence[str], params: Optional[Mapping[str, float]] = None, text: Optional[str] = None):
        self.names = list(coordinates)
        if len(set(self.names)) != len(self.names):
            raise ScenarioError(f"duplicate coordinate names {self.names}")
        self.coords = [sp.Symbol(name, real=True) for name in self.names]
        self.velocities = [sp.Symbol(f"v{name}", real=True) for name in self.names]
        self.params = {name: float(value) for name, value in (params or {}).items()}
        clash = set(self.params) & (set(self.names) | set(FUNCTIONS))
        if clash:
            raise ScenarioError(f"parameter names clash with coordinates or functions: {sorted(clash)}")
        self.text = text

    @property
    def dim(self) -> int:
        return len(self.coords)

    def _error(self, message: str, source: str) -> ScenarioError:
        line, column = locate(self.text, source)
        return ScenarioError(message, line, column)

    def _parse_raw(self, source: str, symbols: Dict[str, sp.Symbol]):
        local = dict(FUNCTIONS)
        local.update(symbols)
        local.update({name: sp.Float(value) for name, value in self.params.items()})
        try:
            return parse_expr(source, local_dict=local, global_dict=dict(PARSER_GLOBALS), transformations=TRANSFORMATIONS)
        except Exception as exc:
            raise self._error(f"cannot parse expression {source!r}: {exc.__class__.__name__}", source) from None

    def _validate(self, expr, source: str, symbols: Dict[str, sp.Symbol]) -> sp.Expr:
        if not isinstance(expr, sp.Expr):
            raise self._error(f"expression {source!r} is not a scalar formula", source)
        unknown_functions = sorted({f.func.__name__ for f in expr.atoms(AppliedUndef)})
        if unknown_functions:
            raise self._error(f"unknown function {unknown_functions[0]!r} in {source!r}", source)
        unknown = sorted(s.name for s in expr.free_symbols if s.name not in symbols)
        if unknown:
            raise self._error(f"unknown symbol {unknown[0]!r} in {source!r}", source)
        return expr

    def _symbols(self, extra: Sequence[sp.Symbol]) -> Dict[str, sp.Symbol]:
        return {s.name: s for s in list(self.coords) + list(extra)}

    def parse(self, source, extra: Sequence[sp.Symbol] = ()) -> sp.Expr:
        if isinstance(source, (int, float)) and not isinstance(source, bool):
            return sp.Float(source)
        if not isinstance(source, str):
            raise ScenarioError(f"expression must be a string or number, got {type(source).__name__}")
        symbols = self._symbols(extra)
        return self._validate(self._parse_raw(source, symbols), source, symbols)

    def parse_tuple(self, source: str, extra: Sequence[sp.Symbol] = ()) -> List[sp.Expr]:
        """Components of a tuple written as one string, e.g. "(-y, x)"."""
        symbols = self._symbols(extra)
        parsed = self._parse_raw(source, symbols)
        items = list(parsed) if isinstance(parsed, (tuple, sp.Tuple)) else [parsed]
        return [self._validate(sp.sympify(item), source, symbols) for item in items]

    def _components(self, sources, what: str, extra: Sequence[sp.Symbol] = ()) -> List[sp.Expr]:
        if isinstance(sources, str):
            exprs = self.parse_tuple(sources, extra)
        elif isinstance(sources, (list, tuple)):
            exprs = [self.parse(s, extra) for s in sources]
        else:
            raise ScenarioError(f"{what} must be a list of expressions or a tuple string, got {sources!r}")
        if len(exprs) != self.dim:
            raise ScenarioError(f"{what} needs {self.dim} components, got {len(exprs)}")
        return exprs

    def _lambdify(self, expr, args=None):
        fn = sp.lambdify(args if args is not None else self.coords, expr, modules="numpy")
        return lambda *values: np.asarray(fn(*values), dtype=float)

    def guard(self, source: Optional[str]):
        """Admissibility predicate expr(q) > 0."""
        if source is None:
            return None
        fn = self._lambdify(self.parse(source))
        return lambda q: bool(fn(*q) > 0.0)

    def scalar(self, source, name: str = "", positive: bool = False, guard=None) -> ScalarField:
        expr = self.parse(source)
        value = self._lambdify(expr)
        grad = self._lambdify([sp.diff(expr, c) for c in self.coords])
        constant = float(expr) if not expr.free_symbols else None
        return ScalarField(
            dim=self.dim,
            func=lambda q: float(value(*q)),
            grad=lambda q: grad(*q).reshape(-1),
            positive=positive,
            domain_guard=guard,
            constant_value=constant,
            name=name or str(source),
        )

    def vector(self, sources, name: str = "", guard=None) -> VectorField:
        exprs = self._components(sources, name or "vector field")
        value = self._lambdify(exprs)
        jacobian = self._lambdify(sp.Matrix(exprs).jacobian(self.coords).tolist())
        return VectorField(
            dim=self.dim,
            func=lambda q: value(*q).reshape(-1),
            jacobian=lambda q: jacobian(*q).reshape(self.dim, self.dim),
            domain_guard=guard,
            name=name,
        )

    def _matrix(self, rows, name: str) -> sp.Matrix:
        n = self.dim
        if not isinstance(rows, (list, tuple)) or len(rows) != n or any(
            not isinstance(row, (list, tuple)) or len(row) != n for row in rows
        ):
            raise ScenarioError(f"{name} must be a {n}x{n} matrix of expressions")
        entries = [[self.parse(s) for s in row] for row in rows]
        for i in range(n):
            for j in range(i + 1, n):
                if sp.simplify(entries[i][j] - entries[j][i]) != 0:
                    raise ScenarioError(
                        f"{name} violates invariant 'symmetry': entry ({i + 1},{j + 1}) differs from ({j + 1},{i + 1})"
                    )
        # mirror the upper triangle so evaluation is exactly symmetric
        return sp.Matrix(n, n, lambda i, j: entries[min(i, j)][max(i, j)])

    def _metric_from_matrix(self, G: sp.Matrix, name: str, guard=None) -> MetricField:
        n = self.dim
        value = self._lambdify(G.tolist())
        partials = self._lambdify([[[sp.diff(G[i, j], c) for c in self.coords] for j in range(n)] for i in range(n)])
        return MetricField(
            dim=n,
            func=lambda q: value(*q).reshape(n, n),
            partials=lambda q: partials(*q).reshape(n, n, n),
            domain_guard=guard,
            name=name,
        )

    def metric(self, rows, name: str = "g", guard=None) -> MetricField:
        return self._metric_from_matrix(self._matrix(rows, name), name, guard)

    def conformal_metric(self, rows, phi_source, name: str = "g_bar", guard=None) -> MetricField:
        """exp(2 phi) g assembled and differentiated symbolically."""
        G = self._matrix(rows, "metric")
        return self._metric_from_matrix(sp.exp(2 * self.parse(phi_source)) * G, name, guard)

    def force(self, sources, name: str = "Z") -> ForceField:
        exprs = self._components(sources, name or "force", extra=self.velocities)
        uses_velocity = any(expr.free_symbols & set(self.velocities) for expr in exprs)
        fn = self._lambdify(exprs, args=list(self.coords) + list(self.velocities))
        return ForceField(
            dim=self.dim,
            func=lambda q, v: fn(*q, *v).reshape(-1),
            basic=not uses_velocity,
            name=name,
        )

    def rate(self, source):
        """A positive rate as a function of the old curve parameter t."""
        t = sp.Symbol(PARAMETER_SYMBOL, real=True)
        expr = self.parse(source, extra=[t])
        if expr.free_symbols & set(self.coords):
            raise self._error(f"rate {source!r} may only depend on {PARAMETER_SYMBOL!r}", str(source))
        value = sp.lambdify([t], expr, modules="numpy")
        slope = sp.lambdify([t], sp.diff(expr, t), modules="numpy")
        return (lambda s: float(value(s))), (lambda s: float(slope(s)))


def coordinates_for(dim: Optional[int], names: Optional[Sequence[str]]) -> List[str]:
    if names:
        return list(names)
    if dim in DEFAULT_COORDINATES:
        return list(DEFAULT_COORDINATES[dim])
    raise ScenarioError("coordinates must be listed for dimensions above 3")
