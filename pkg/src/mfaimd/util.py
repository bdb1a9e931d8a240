"""Shared plumbing: canonical config digests and a deterministic replica map."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor


def canonical_json(doc) -> str:
    """JSON serialization that is stable under key reordering."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_digest(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Apply ``fn`` over ``items`` and return results in input order.

    ``workers`` caps the process count (None = cpu count).  Results are
    assembled by index, and every task derives its randomness from its own
    arguments, so the output is identical for any worker count.  Falls back
    to a serial loop when processes are unavailable.
    """
    items = list(items)
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(int(workers), len(items) or 1))
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    try:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, len(items) // (4 * workers))
            return list(pool.map(fn, items, chunksize=chunk))
    except (OSError, PermissionError):
        return [fn(it) for it in items]
