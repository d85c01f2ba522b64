"""Counter-based random streams.

Every draw is keyed by ``(seed, purpose, *counters)`` through a Philox
generator, so results never depend on call order or on how work is split
across workers.
"""
from __future__ import annotations

import zlib

import numpy as np

# Fixed block size for sample-indexed noise; independent of worker count.
BLOCK = 4096


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, counters) key."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _tag(purpose), *(int(c) for c in counters)])
    return np.random.Generator(np.random.Philox(ss))


def normals(seed: int, purpose: str, counter: int, n: int, dim: int) -> np.ndarray:
    """``n x dim`` standard normals for one counter (e.g. a time step).

    Rows are produced in fixed blocks of ``BLOCK`` samples, each keyed by its
    block index, so row ``i`` is the same whatever ``n`` is.
    """
    out = np.empty((n, dim))
    for b, start in enumerate(range(0, n, BLOCK)):
        stop = min(start + BLOCK, n)
        out[start:stop] = stream(seed, purpose, counter, b).standard_normal((BLOCK, dim))[: stop - start]
    return out


def uniforms(seed: int, purpose: str, counter: int, n: int) -> np.ndarray:
    out = np.empty(n)
    for b, start in enumerate(range(0, n, BLOCK)):
        stop = min(start + BLOCK, n)
        out[start:stop] = stream(seed, purpose, counter, b).random(BLOCK)[: stop - start]
    return out


def derive_seed(seed: int, purpose: str, *counters: int) -> int:
    """A 31-bit child seed for APIs that take a plain integer seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _tag(purpose), *(int(c) for c in counters)])
    return int(ss.generate_state(1)[0] >> 1)
