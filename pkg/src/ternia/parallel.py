"""Worker-count policy shared by the modules that fan out independent tasks."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "TERNIA_THREADS"


def worker_count() -> int:
    """Workers allowed by ``TERNIA_THREADS``: 0 or unset means one per CPU."""
    raw = os.environ.get(ENV_VAR, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"{ENV_VAR} must be >= 0")
    return n or (os.cpu_count() or 1)


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """``list(map(fn, items))``, fanned out over processes when allowed.

    Results come back in input order, so output never depends on scheduling.
    """
    items = list(items)
    workers = min(worker_count() if workers is None else workers, len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
