"""Logging configuration for the CLI."""
import logging
import sys
from typing import Optional

from src.utils.settings import default_log_level

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(verbosity: int = 0, level: Optional[str] = None) -> None:
    """Configure the root logger once; -v lowers the threshold to INFO, -vv to DEBUG."""
    if level is None:
        level = default_log_level()
        if verbosity == 1:
            level = "INFO"
        elif verbosity >= 2:
            level = "DEBUG"

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
