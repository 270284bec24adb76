"""Shared plumbing: deterministic seed derivation and the worker-count cap."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "FG3D_THREADS"


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(master: int, *tags) -> int:
    """Stable child seed from a master seed and a path of tags (ints or strings)."""
    ss = np.random.SeedSequence([int(master)] + [_tag_int(t) for t in tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


def worker_count() -> int:
    """Worker cap from the FG3D_THREADS env var (default 1 = sequential)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """Map fn over items, optionally on a thread pool, preserving input order."""
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
