"""Order-preserving process pool map; results never depend on the worker count."""
from __future__ import annotations

import multiprocessing as mp
from functools import lru_cache
from typing import Callable, Iterable

from .world import EnvSpec, generate_environment


def pmap(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = mp.get_context("fork")
    with ctx.Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)


@lru_cache(maxsize=64)
def cached_environment(seed: int, spec: EnvSpec):
    return generate_environment(seed, spec)
