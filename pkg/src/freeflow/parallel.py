"""Share-nothing fan-out of independent simulations across processes."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count(jobs: int | None = None) -> int:
    if jobs is None:
        raw = os.environ.get("FREEFLOW_THREADS", "1")
        try:
            jobs = int(raw)
        except ValueError:
            raise ValueError(f"FREEFLOW_THREADS must be an integer, got {raw!r}") from None
    return max(1, int(jobs))


def parallel_map(fn, items, jobs: int | None = None) -> list:
    """``[fn(x) for x in items]``, possibly in worker processes; result order follows ``items``."""
    items = list(items)
    n = min(worker_count(jobs), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
