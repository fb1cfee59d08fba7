"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, purpose, *indices)``.  Paths are processed in fixed
blocks of :data:`BLOCK` so that the stream consumed for a given path never
depends on how work is scheduled.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

SCHEME = "philox-keyed-v1"
BLOCK = 8192

_PURPOSES = {
    "dW": 1,
    "jump": 2,
    "bridge": 3,
    "tree": 4,
    "kernel": 5,
    "misc": 6,
    "resample-dW": 7,
    "resample-jump": 8,
}


def _float_key(value: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(value)))[0]


def keyed_generator(seed: int, purpose: str, *indices: float | int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed``, ``purpose`` and ``indices``.

    Integer indices are used directly; floats are keyed by their bit pattern.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, _PURPOSES[purpose]]
    for idx in indices:
        if isinstance(idx, (float, np.floating)):
            words.append(_float_key(idx))
        else:
            words.append(int(idx) & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(struct.pack(f"<{len(words)}Q", *words), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def blocks(n_paths: int):
    """Yield ``(block_index, start, stop)`` covering ``range(n_paths)``."""
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        yield b, start, min(start + BLOCK, n_paths)
