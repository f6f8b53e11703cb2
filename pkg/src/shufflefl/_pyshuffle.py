"""Pure-Python twin of the compiled shuffle kernel.

Keystream bytes come from the ``cryptography`` ChaCha20 primitive; the
rejection-sampled Fisher-Yates loop runs in the interpreter.
"""
from __future__ import annotations

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher
from cryptography.hazmat.primitives.ciphers.algorithms import ChaCha20

_U64 = 1 << 64
_CHUNK_WORDS = 4096
# 4-byte little-endian block counter followed by the 12-byte nonce, all zero
_ZERO_NONCE = bytes(16)


class _WordStream:
    def __init__(self, seed: bytes):
        self._enc = Cipher(ChaCha20(seed, _ZERO_NONCE), mode=None).encryptor()
        self._words: list[int] = []
        self._pos = 0

    def next(self) -> int:
        if self._pos == len(self._words):
            raw = self._enc.update(bytes(8 * _CHUNK_WORDS))
            self._words = np.frombuffer(raw, dtype="<u8").tolist()
            self._pos = 0
        w = self._words[self._pos]
        self._pos += 1
        return w


def keystream(seed: bytes, nbytes: int) -> bytes:
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    enc = Cipher(ChaCha20(seed, _ZERO_NONCE), mode=None).encryptor()
    return enc.update(bytes(nbytes))


def fisher_yates(seed: bytes, m: int) -> np.ndarray:
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    if m < 0:
        raise ValueError("m must be non-negative")
    stream = _WordStream(seed)
    perm = list(range(m))
    for i in range(m - 1, 0, -1):
        bound = i + 1
        limit = _U64 - 1 - (_U64 % bound)
        w = stream.next()
        while w > limit:
            w = stream.next()
        j = w % bound
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)
