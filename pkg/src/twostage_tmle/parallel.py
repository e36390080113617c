"""Bounded process pool with order-preserving results."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: int) -> int:
    if threads < 0:
        raise ValueError("threads must be >= 0")
    return threads or (os.cpu_count() or 1)


def pool_map(func: Callable[..., R], items: Iterable[T], threads: int, *args) -> list[R]:
    """``[func(item, *args) for item in items]`` across ``threads`` worker processes.

    Results come back in input order, so reductions over them are identical
    whatever the worker count.
    """
    items = list(items)
    n = min(resolve_threads(threads), len(items))
    call = partial(_apply, func, args)
    if n <= 1:
        return [call(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(call, items, chunksize=max(1, len(items) // (4 * n))))


def _apply(func, args, item):
    return func(item, *args)
