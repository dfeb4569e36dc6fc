"""Worker-count control via the GENROBUST_THREADS environment variable.

Unset or 0 means serial deterministic mode. Work is always split into the
same fixed-size chunks regardless of the worker count, so parallel and
serial runs see bit-identical per-chunk inputs and merge by chunk index.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "GENROBUST_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from exc
    return max(n, 0)


def map_ordered(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply fn to each item, optionally on a thread pool; order preserved."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
