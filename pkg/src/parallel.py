"""
Thread pool sizing for query scanning and oracle fan-out
"""
import os
from concurrent.futures import ThreadPoolExecutor

from src.errors import ConfigError

THREADS_ENV = "REGDIT_THREADS"


def thread_count() -> int:
    """Worker count from REGDIT_THREADS, defaulting to the CPU count."""
    value = os.environ.get(THREADS_ENV)
    if value is None or value == "":
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got: {value!r}")
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got: {count}")
    return count


def map_ordered(fn, items) -> list:
    """fn over items on the shared pool size; results come back in input order."""
    items = list(items)
    workers = min(thread_count(), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
