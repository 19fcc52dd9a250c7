"""Seeded random streams.

Every Monte-Carlo task draws from its own child stream spawned off a master
seed, so results do not depend on how tasks are scheduled across threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def as_seedseq(seed: SeedLike) -> np.random.SeedSequence:
    """Normalize ``seed``; a SeedSequence is copied with a fresh spawn counter.

    Spawning from the result therefore always yields the same children, so
    passing one sequence to several consumers gives them common random
    numbers.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    if isinstance(seed, np.random.Generator):
        # draw a child entropy value from the generator itself
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    return np.random.SeedSequence(seed)


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(as_seedseq(seed))


def substreams(seed: SeedLike, count: int) -> list[np.random.Generator]:
    """Return ``count`` independent generators derived from ``seed``."""
    return [np.random.default_rng(s) for s in as_seedseq(seed).spawn(count)]


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` preserving order, using up to ``threads`` workers."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def seeded_map(
    fn: Callable[[T, np.random.Generator], R],
    items: Sequence[T],
    seed: SeedLike,
    threads: int = 1,
) -> list[R]:
    """Like :func:`parallel_map` but hands each item its own substream."""
    streams = substreams(seed, len(items))
    return parallel_map(lambda pair: fn(*pair), list(zip(items, streams)), threads)
