"""Deterministic seeded shuffling shared by the model-mapper and the
per-round permutations.

The compiled kernel is used when it was built; set ``SHUFFLEFL_PURE=1`` to
force the pure-Python implementation.
"""
from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from shufflefl import _pyshuffle

if os.environ.get("SHUFFLEFL_PURE"):
    _impl = _pyshuffle
    BACKEND = "python"
else:
    try:
        from shufflefl import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _pyshuffle
        BACKEND = "python"

BACKENDS = {"python": _pyshuffle}
if BACKEND == "compiled":
    BACKENDS["compiled"] = _impl

MAPPER_PARTITION_SENTINEL = 0xFFFFFFFF


def derive_seed(key: bytes, round_id: int, partition_index: int) -> bytes:
    """SHA-256 over ``key || round_id (u64 BE) || partition_index (u32 BE)``."""
    if len(key) != 32:
        raise ValueError(f"key must be 32 bytes, got {len(key)}")
    if not 0 <= round_id < 1 << 64:
        raise ValueError("round_id must fit in an unsigned 64-bit integer")
    if not 0 <= partition_index < 1 << 32:
        raise ValueError("partition_index must fit in an unsigned 32-bit integer")
    return hashlib.sha256(key + struct.pack(">QI", round_id, partition_index)).digest()


def seeded_permutation(seed: bytes, m: int, backend: str | None = None) -> np.ndarray:
    """Fisher-Yates permutation of ``range(m)`` driven by a ChaCha20 keystream."""
    impl = _impl if backend is None else BACKENDS[backend]
    return impl.fisher_yates(bytes(seed), int(m))


def keystream(seed: bytes, nbytes: int, backend: str | None = None) -> bytes:
    impl = _impl if backend is None else BACKENDS[backend]
    return impl.keystream(bytes(seed), int(nbytes))
