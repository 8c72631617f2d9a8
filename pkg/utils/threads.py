"""
Worker-count resolution and order-preserving thread maps.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "BOWDA_THREADS"


def resolve_threads(requested: Optional[int] = None) -> int:
    """
    Worker count: explicit value, else BOWDA_THREADS (a .env file is
    honored), else the machine's CPU count.
    """
    if requested is not None:
        if requested < 1:
            raise ValueError(f"thread count must be >= 1, got {requested}")
        return int(requested)
    load_dotenv(override=False)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got '{env}'")
        if value < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {value}")
        logger.debug("using %d worker threads from %s", value, THREADS_ENV)
        return value
    return os.cpu_count() or 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """
    Apply ``fn`` to every item and return results in input order.

    With one worker the map runs inline; results never depend on the
    worker count because callers reduce them in list order.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
