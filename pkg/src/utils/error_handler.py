"""
Error types and console error reporting for the toolkit.

Every failure raised by the numerical modules derives from ToolkitError and
carries the exit code the CLI should return for it.
"""
import sys
from typing import Optional, Sequence

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID_INPUT = 2


class ToolkitError(Exception):
    """Base error. `point` is the offending coordinate point, when known."""

    exit_code = EXIT_CHECK_FAILED

    def __init__(self, message: str, point: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.message = message
        self.point = None if point is None else [float(x) for x in point]

    def __str__(self) -> str:
        if self.point is None:
            return self.message
        coords = ", ".join(f"{x:.6g}" for x in self.point)
        return f"{self.message} at q = ({coords})"


class InvalidInputError(ToolkitError):
    """Bad arguments, dimension mismatches and violated preconditions."""

    exit_code = EXIT_INVALID_INPUT


class DimensionMismatchError(InvalidInputError):
    pass


class ScenarioError(InvalidInputError):
    """Scenario text that cannot be turned into a runnable scenario."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class DomainViolationError(ToolkitError):
    """A point left the admissible domain: nonpositive factor, lost definiteness, guard hit."""


class IntegrationError(ToolkitError):
    """The integrator could not complete: step exhaustion, non-finite values."""


class CertificationError(ToolkitError):
    """A residual-certified hypothesis does not hold."""

    def __init__(self, message: str, residual: Optional[float] = None, point=None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message, point)
        self.residual = residual


def handle_error(error) -> int:
    """Print error message to stderr and return the matching exit code."""
    print(f"ERROR: {error}", file=sys.stderr)
    if isinstance(error, ToolkitError):
        return error.exit_code
    return EXIT_CHECK_FAILED
