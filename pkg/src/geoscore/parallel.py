"""Worker pool helpers.  Results never depend on the worker count."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

ENV_THREADS = "GEOSCORE_THREADS"


def worker_count(requested=None) -> int:
    if requested is not None:
        return max(1, int(requested))
    value = os.environ.get(ENV_THREADS, "").strip()
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            return 1
    return 1


def chunked(items: Sequence, size: int) -> list:
    return [items[i:i + size] for i in range(0, len(items), size)]


def map_ordered(fn: Callable, items: Sequence, workers=None) -> list:
    """``[fn(item) for item in items]``, possibly on several threads."""
    workers = worker_count(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
