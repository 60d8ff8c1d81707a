"""
Performance utilities for the toolkit.
Provides per-call caching, timing and concurrent batch execution helpers.
"""
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from typing import Any, Callable, Dict, Hashable, Iterable, List, Optional

import numpy as np

from src.utils.settings import SLOW_OPERATION_SECONDS

logger = logging.getLogger(__name__)


class PointCache:
    """Thread-safe cache keyed by coordinate points.

    Meant to live for a single operation call: the owner creates it, uses it
    while evaluating several quantities at the same points, and drops it.
    """

    def __init__(self):
        self.cache: Dict[Hashable, Any] = {}
        self.lock = threading.RLock()
        self.hits = 0

    @staticmethod
    def key(q) -> bytes:
        return np.ascontiguousarray(q, dtype=float).tobytes()

    def get_or_compute(self, q, compute: Callable[[], Any]) -> Any:
        """Return the cached value for q, computing and storing it on a miss."""
        k = self.key(q)
        with self.lock:
            if k in self.cache:
                self.hits += 1
                return self.cache[k]
        value = compute()
        with self.lock:
            self.cache.setdefault(k, value)
            return self.cache[k]

    def clear(self) -> None:
        with self.lock:
            self.cache.clear()

    def __len__(self) -> int:
        with self.lock:
            return len(self.cache)


def performance_monitor(func):
    """Decorator to monitor function performance.

    The wall time of the last call is kept on the wrapper as `last_duration`.
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            duration = time.perf_counter() - start_time
            wrapper.last_duration = duration
            if duration > SLOW_OPERATION_SECONDS:
                logger.warning("SLOW OPERATION: %s took %.2fs", func.__name__, duration)
            else:
                logger.debug("%s took %.3fs", func.__name__, duration)

    wrapper.last_duration = 0.0
    return wrapper


def run_parallel(func: Callable[[Any], Any], items: Iterable[Any], jobs: Optional[int] = 1) -> List[Any]:
    """Apply func to every item, concurrently when jobs > 1.

    Results come back in input order regardless of completion order.
    """
    items = list(items)
    if not jobs or jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(func, item) for item in items]
        return [future.result() for future in futures]
