"""Counter-based random substreams.

Every draw in the package comes from a Philox generator keyed by
``(seed, stage, index)``. Work is cut into fixed-size blocks of paths and each
block owns its own key, so output does not depend on how blocks are scheduled
over threads.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK_SIZE = 4096


def stage_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def generator(seed: int, stage: str, *index: int) -> np.random.Generator:
    """Philox generator for one named substream."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(stage_id(stage),) + tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n: int, size: int = BLOCK_SIZE):
    """(block_index, start, stop) triples covering ``range(n)``."""
    return [(i, lo, min(lo + size, n)) for i, lo in enumerate(range(0, n, size))]


def map_ordered(fn, items, threads: int = 1):
    """``[fn(item) for item in items]`` evaluated on up to ``threads`` workers."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
