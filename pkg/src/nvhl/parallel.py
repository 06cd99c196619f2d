"""Chunked evaluation with an optional thread pool.

The pool size is read from ``NVHL_THREADS`` (default: 1). Chunks are
independent and their results are concatenated in order, so outputs do not
depend on the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


def thread_count() -> int:
    raw = os.environ.get("NVHL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"NVHL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def chunk_slices(n: int, size: int) -> list[slice]:
    size = max(1, int(size))
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_chunks(fn: Callable[[slice], T], n: int, size: int) -> list[T]:
    """Apply ``fn`` to consecutive slices covering ``range(n)``."""
    slices = chunk_slices(n, size)
    workers = min(thread_count(), len(slices))
    if workers <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, slices))


def concat(parts: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    return np.concatenate(parts, axis=axis) if parts else np.zeros(0)
