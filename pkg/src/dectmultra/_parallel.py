"""Chunked thread parallelism with results independent of the worker count.

Work is split into chunks whose boundaries depend only on the problem size,
and BLAS is pinned to one thread inside each chunk, so every chunk performs
exactly the same floating-point operations whether it runs on 1 or 8
workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits

CHUNK = 4096

_threads = 1


def set_threads(n: int | None) -> None:
    """Set the worker cap used by :func:`map_chunks` (``None``: CPU count)."""
    global _threads
    _threads = max(1, int(n if n is not None else (os.cpu_count() or 1)))


def get_threads() -> int:
    return _threads


@contextmanager
def threads(n: int | None):
    old = _threads
    set_threads(n)
    try:
        yield
    finally:
        set_threads(old)


def chunk_bounds(n: int, chunk: int | None = None) -> list[tuple[int, int]]:
    chunk = chunk or CHUNK
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def map_chunks(fn: Callable[[int, int], object], n: int, chunk: int | None = None) -> list:
    """Call ``fn(start, stop)`` over fixed chunks of ``range(n)``, in order."""
    bounds = chunk_bounds(n, chunk)
    with threadpool_limits(limits=1):
        if _threads == 1 or len(bounds) <= 1:
            return [fn(a, b) for a, b in bounds]
        with ThreadPoolExecutor(max_workers=min(_threads, len(bounds))) as pool:
            return list(pool.map(lambda ab: fn(*ab), bounds))


def map_items(fn: Callable, items: Sequence) -> list:
    """Apply ``fn`` to each item (e.g. one per transform class), in order."""
    with threadpool_limits(limits=1):
        if _threads == 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=min(_threads, len(items))) as pool:
            return list(pool.map(fn, items))
