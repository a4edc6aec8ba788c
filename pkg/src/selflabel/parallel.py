"""Process-pool helper honoring the L2L_THREADS environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count() -> int:
    """Worker cap from L2L_THREADS (default 1 = serial)."""
    raw = os.environ.get("L2L_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"L2L_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def parallel_map(fn, items, workers: int | None = None):
    """Order-preserving map over items, forked across processes when the
    worker cap allows.  Results are identical to serial evaluation because
    every item carries its own seed."""
    items = list(items)
    if workers is None:
        workers = worker_count()
    workers = min(workers, len(items)) if items else 1
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (workers * 4))))
