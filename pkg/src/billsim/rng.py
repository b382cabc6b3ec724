"""Counter-based random streams keyed by (seed, replicate, purpose).

Every stochastic input of a simulation is drawn from its own Philox stream so
that results do not depend on evaluation order or on how work is split across
threads.
"""
from __future__ import annotations

import hashlib
import zlib

import numpy as np

DEFAULT_SEED = 20240917


def stream(seed: int, replicate: int, name: str) -> np.random.Generator:
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(replicate), tag])
    return np.random.Generator(np.random.Philox(ss))


def checksum(*arrays: np.ndarray) -> str:
    """Short hex digest over the raw bytes of ``arrays`` (used to assert CRN pairing)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
