"""Order-preserving process-pool map.

Results come back in input order and are reduced by the caller, so the
worker count never changes any output. Pools are created on first use and
kept for the life of the process.
"""

from __future__ import annotations

import atexit
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

DEFAULT_WORKERS = 1

_pools = {}


def resolve_workers(workers):
    if workers is None:
        return DEFAULT_WORKERS
    if workers <= 0:
        return os.cpu_count() or 1
    return workers


def _pool(workers):
    ex = _pools.get(workers)
    if ex is None:
        ex = ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork"))
        _pools[workers] = ex
    return ex


@atexit.register
def shutdown():
    while _pools:
        _, ex = _pools.popitem()
        ex.shutdown(wait=True)


def pmap(fn, items, workers=None):
    items = list(items)
    workers = resolve_workers(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunk = -(-len(items) // workers)
    return list(_pool(workers).map(fn, items, chunksize=chunk))
