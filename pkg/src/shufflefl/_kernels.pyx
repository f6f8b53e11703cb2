# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ChaCha20 keystream and Fisher-Yates kernel.

Mirrors :mod:`shufflefl._pyshuffle` exactly; the two are cross-checked in
the test suite.
"""
import numpy as np

cimport numpy as cnp
from libc.stdint cimport int64_t, uint32_t, uint64_t
from libc.string cimport memcpy

cnp.import_array()


cdef struct Stream:
    uint32_t key[8]
    uint32_t counter
    uint32_t block[16]
    int pos  # next unread 64-bit word in block, 8 == exhausted


cdef inline uint32_t _rotl(uint32_t v, int c) noexcept nogil:
    return (v << c) | (v >> (32 - c))


cdef inline void _quarter(uint32_t* x, int a, int b, int c, int d) noexcept nogil:
    x[a] += x[b]; x[d] ^= x[a]; x[d] = _rotl(x[d], 16)
    x[c] += x[d]; x[b] ^= x[c]; x[b] = _rotl(x[b], 12)
    x[a] += x[b]; x[d] ^= x[a]; x[d] = _rotl(x[d], 8)
    x[c] += x[d]; x[b] ^= x[c]; x[b] = _rotl(x[b], 7)


cdef void _chacha_block(Stream* s) noexcept nogil:
    cdef uint32_t init[16]
    cdef uint32_t x[16]
    cdef int i
    init[0] = 0x61707865
    init[1] = 0x3320646e
    init[2] = 0x79622d32
    init[3] = 0x6b206574
    for i in range(8):
        init[4 + i] = s.key[i]
    init[12] = s.counter
    init[13] = 0
    init[14] = 0
    init[15] = 0
    memcpy(x, init, sizeof(init))
    for i in range(10):
        _quarter(x, 0, 4, 8, 12)
        _quarter(x, 1, 5, 9, 13)
        _quarter(x, 2, 6, 10, 14)
        _quarter(x, 3, 7, 11, 15)
        _quarter(x, 0, 5, 10, 15)
        _quarter(x, 1, 6, 11, 12)
        _quarter(x, 2, 7, 8, 13)
        _quarter(x, 3, 4, 9, 14)
    for i in range(16):
        s.block[i] = x[i] + init[i]
    s.counter += 1
    s.pos = 0


cdef inline uint64_t _next_u64(Stream* s) noexcept nogil:
    if s.pos == 8:
        _chacha_block(s)
    cdef uint64_t lo = s.block[2 * s.pos]
    cdef uint64_t hi = s.block[2 * s.pos + 1]
    s.pos += 1
    return lo | (hi << 32)


cdef void _init_stream(Stream* s, const unsigned char* seed) noexcept nogil:
    cdef int i
    for i in range(8):
        s.key[i] = (<uint32_t>seed[4 * i]
                    | (<uint32_t>seed[4 * i + 1] << 8)
                    | (<uint32_t>seed[4 * i + 2] << 16)
                    | (<uint32_t>seed[4 * i + 3] << 24))
    s.counter = 0
    s.pos = 8


def keystream(bytes seed, Py_ssize_t nbytes):
    """Raw ChaCha20 keystream (zero nonce, counter from 0)."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    cdef Stream s
    _init_stream(&s, <const unsigned char*>seed)
    nwords = (nbytes + 7) // 8
    out = np.empty(nwords, dtype="<u8")
    cdef uint64_t[::1] view = out
    cdef Py_ssize_t t
    for t in range(nwords):
        view[t] = _next_u64(&s)
    return out.tobytes()[:nbytes]


def fisher_yates(bytes seed, Py_ssize_t m):
    """Seeded Fisher-Yates permutation of ``range(m)``."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    if m < 0:
        raise ValueError("m must be non-negative")
    cdef Stream s
    _init_stream(&s, <const unsigned char*>seed)
    perm = np.arange(m, dtype=np.int64)
    cdef int64_t[::1] p = perm
    cdef Py_ssize_t i
    cdef uint64_t bound, rem, limit, w, j
    cdef int64_t tmp
    with nogil:
        i = m - 1
        while i >= 1:
            bound = <uint64_t>(i + 1)
            # 2**64 mod bound
            rem = (<uint64_t>0 - bound) % bound
            limit = <uint64_t>0xFFFFFFFFFFFFFFFF - rem
            w = _next_u64(&s)
            while w > limit:
                w = _next_u64(&s)
            j = w % bound
            tmp = p[i]
            p[i] = p[j]
            p[j] = tmp
            i -= 1
    return perm
