"""Named, seedable random streams.

All randomness in the package is drawn from ``numpy.random.Generator``
instances built on PCG64, seeded through ``SeedSequence(seed,
spawn_key=(stream, *path))``. The stream numbers below are part of the
reproducibility contract: changing one changes every plan drawn with it.

=================  ====  ==============================================
stream             id    used for
=================  ====  ==============================================
PLAN_PERMUTATION    1    shuffling ids within a stratum before splitting
LEFTOVER_CHOICE     2    choosing which ids are left out of every pool
CHAIN_ORDER         3    node orderings for chained summation
MASK                4    mask values (node-local)
COHORT              5    simulated cohorts, one sub-stream per replicate
=================  ====  ==============================================

``path`` components further split a stream, e.g. ``(CASE,)`` vs
``(CONTROL,)`` for the two strata, or ``(rep,)`` for simulation replicates.
Path components must be non-negative integers; strings are hashed to
64-bit integers with SHA-256 so ids and term names can address sub-streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

PLAN_PERMUTATION = 1
LEFTOVER_CHOICE = 2
CHAIN_ORDER = 3
MASK = 4
COHORT = 5

CASE = 1
CONTROL = 0


def _key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path components must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return int(seed)


def stream(seed: int, stream_id: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, stream_id, *path)``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=(stream_id, *(_key(p) for p in path)))
    return np.random.Generator(np.random.PCG64(ss))
