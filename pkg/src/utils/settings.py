"""
Toolkit-wide defaults and environment configuration.
"""
import os
from pathlib import Path

# Version information
APP_VERSION = "1.0.0"

OUTPUT_DIR_ENV = "SUNDMAN_OUTPUT_DIR"
LOG_LEVEL_ENV = "SUNDMAN_LOG_LEVEL"

# Integrator defaults
DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
DEFAULT_MAX_STEPS = 200_000

# Finite differences: h = max(FD_FLOOR, FD_RELATIVE * |q_j|) per coordinate
FD_FLOOR = 1e-6
FD_RELATIVE = 1e-6

# Residual sample sets
DEFAULT_SAMPLE_COUNT = 200
DEFAULT_ANNULUS = (0.5, 2.0)
DEFAULT_SEED = 0

# X(q) below this norm is treated as vanishing by least-squares factor fits
VANISHING_NORM = 1e-10

# Jacobi domain margin: orbits keep E0 - V >= JACOBI_MARGIN * |E0|
JACOBI_MARGIN = 1e-6

# Operations slower than this are logged by performance_monitor
SLOW_OPERATION_SECONDS = 30.0


def default_output_dir() -> Path:
    """Output directory from SUNDMAN_OUTPUT_DIR, falling back to ./output."""
    return Path(os.getenv(OUTPUT_DIR_ENV, "output"))


def default_log_level() -> str:
    return os.getenv(LOG_LEVEL_ENV, "WARNING").upper()
