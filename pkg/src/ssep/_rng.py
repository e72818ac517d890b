"""Deterministic random streams.

Monte Carlo work is split into fixed-size blocks of replicas; block ``b`` of a
run seeded with ``seed`` always draws from ``default_rng([seed, b, tag])``, so
results do not depend on how blocks are scheduled across workers.
"""

import numpy as np

BLOCK_SIZE = 10_000


def block_rng(seed, block, tag=0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(block), int(tag)]))


def blocks(replicas, block_size=BLOCK_SIZE):
    """``(block_index, size)`` pairs covering ``replicas``."""
    out = []
    b = 0
    left = int(replicas)
    while left > 0:
        m = min(block_size, left)
        out.append((b, m))
        left -= m
        b += 1
    return out


def map_blocks(fn, items, n_jobs=1):
    """Apply ``fn`` to each item, preserving order (process pool if ``n_jobs > 1``)."""
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))
