"""Worker-count policy shared by the path-parallel routines."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    cap = os.environ.get("PASSPORT_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def chunked_map(fn, n_items: int, min_chunk: int = 20000):
    """Apply ``fn(start, stop)`` over contiguous chunks; results in chunk order."""
    workers = worker_count()
    if workers == 1 or n_items < 2 * min_chunk:
        return [fn(0, n_items)]
    n_chunks = min(workers, n_items // min_chunk)
    bounds = [n_items * i // n_chunks for i in range(n_chunks + 1)]
    with ThreadPoolExecutor(max_workers=n_chunks) as pool:
        futures = [pool.submit(fn, a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        return [f.result() for f in futures]
