"""Thread-count policy. ``OAAREG_THREADS`` caps worker threads; results never
depend on the value because every parallel reduction is order-independent.
"""

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "OAAREG_THREADS"


def thread_cap() -> int:
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn, items, threads=None):
    """``list(map(fn, items))`` evaluated on up to ``threads`` workers."""
    items = list(items)
    threads = thread_cap() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
