"""Small shared helpers: worker-pool mapping capped by AVFUSE_THREADS."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    """Worker cap from the AVFUSE_THREADS environment variable (default 1)."""
    raw = os.environ.get("AVFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"AVFUSE_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def map_parallel(fn, items):
    """Map ``fn`` over ``items`` preserving order; threads only when the
    worker cap allows it. Each item must be independent of the others."""
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
