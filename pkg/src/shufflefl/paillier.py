"""Paillier cryptosystem with fixed-point encoding for encrypted fusion.

Big-integer arithmetic goes through gmpy2; the scheme itself (key
generation, encryption, homomorphic operations, encoding) lives here.
"""
from __future__ import annotations

import base64
import json
import math
import secrets
from dataclasses import dataclass
from typing import Sequence

import gmpy2
import numpy as np

SUPPORTED_BITS = (512, 1024, 2048)
FRACTION_BITS = 40
# 40 Miller-Rabin rounds bound the false-prime probability by 4^-40 = 2^-80
_MR_ROUNDS = 40


@dataclass(frozen=True)
class PublicKey:
    n: int

    @property
    def nsquare(self) -> int:
        return self.n * self.n

    @property
    def g(self) -> int:
        return self.n + 1


@dataclass(frozen=True)
class PrivateKey:
    public: PublicKey
    p: int
    q: int
    lam: int
    mu: int


@dataclass(frozen=True)
class PaillierKeypair:
    public: PublicKey
    private: PrivateKey
    bits: int

    @property
    def n(self) -> int:
        return self.public.n


def _random_prime(bits: int) -> int:
    while True:
        cand = secrets.randbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if gmpy2.is_prime(cand, _MR_ROUNDS):
            return int(cand)


def keypair_from_primes(p: int, q: int) -> PaillierKeypair:
    """Assemble a keypair from two primes (also used for toy test moduli)."""
    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise ValueError("gcd(n, (p-1)(q-1)) must be 1")
    lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
    pub = PublicKey(n)
    mu = int(gmpy2.invert(_L(pow(pub.g, lam, n * n), n), n))
    return PaillierKeypair(pub, PrivateKey(pub, p, q, lam, mu), n.bit_length())


def keygen(bits: int = 2048) -> PaillierKeypair:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported key size {bits}; choose one of {SUPPORTED_BITS}")
    half = bits // 2
    while True:
        p = _random_prime(half)
        q = _random_prime(half)
        if p != q and (p * q).bit_length() == bits:
            try:
                return keypair_from_primes(p, q)
            except ValueError:
                continue


def _L(u: int, n: int) -> int:
    return (u - 1) // n


def _check_plaintext(pk: PublicKey, m: int) -> None:
    if not 0 <= m < pk.n:
        raise ValueError("plaintext out of range [0, n)")


def _check_ciphertext(pk: PublicKey, c: int) -> None:
    if not 0 < c < pk.nsquare:
        raise ValueError("ciphertext out of range (0, n^2)")


def random_r(pk: PublicKey) -> int:
    while True:
        r = secrets.randbelow(pk.n - 1) + 1
        if math.gcd(r, pk.n) == 1:
            return r


def encrypt(pk: PublicKey, m: int, r: int | None = None) -> int:
    """``c = g^m * r^n mod n^2`` with ``g = n + 1``."""
    m = int(m)
    _check_plaintext(pk, m)
    if r is None:
        r = random_r(pk)
    elif not 0 < r < pk.n or math.gcd(r, pk.n) != 1:
        raise ValueError("r must lie in (0, n) and be coprime to n")
    n2 = pk.nsquare
    # (n + 1)^m = 1 + m*n  (mod n^2)
    gm = (1 + m * pk.n) % n2
    return int(gm * gmpy2.powmod(r, pk.n, n2) % n2)


def decrypt(sk: PrivateKey, c: int) -> int:
    pk = sk.public
    c = int(c)
    _check_ciphertext(pk, c)
    u = int(gmpy2.powmod(c, sk.lam, pk.nsquare))
    return _L(u, pk.n) * sk.mu % pk.n


def add_cipher(pk: PublicKey, c1: int, c2: int) -> int:
    _check_ciphertext(pk, c1)
    _check_ciphertext(pk, c2)
    return int(c1) * int(c2) % pk.nsquare


def scalar_mul(pk: PublicKey, c: int, a: int) -> int:
    _check_ciphertext(pk, c)
    a = int(a) % pk.n
    return int(gmpy2.powmod(int(c), a, pk.nsquare))


class FixedPointCodec:
    """Signed fixed-point numbers with ``FRACTION_BITS`` fractional bits mod ``n``.

    Residues above ``n // 2`` decode as negative.
    """

    def __init__(self, n: int, fraction_bits: int = FRACTION_BITS):
        self.n = int(n)
        self.fraction_bits = fraction_bits
        self.scale = 1 << fraction_bits
        self.max_abs = self.n // (1 << (fraction_bits + 2))

    def encode(self, x: float) -> int:
        x = float(x)
        if not math.isfinite(x):
            raise ValueError("cannot encode a non-finite value")
        if abs(x) >= self.max_abs:
            raise OverflowError(f"|{x}| exceeds the codec range {self.max_abs}")
        return round(x * self.scale) % self.n

    def decode(self, m: int, divisor: int = 1) -> float:
        m = int(m) % self.n
        if m > self.n // 2:
            m -= self.n
        return m / (self.scale * divisor)

    def encode_vector(self, values) -> list[int]:
        scaled = np.rint(np.asarray(values, dtype=np.float64) * self.scale)
        if np.abs(scaled).max(initial=0) >= self.max_abs * self.scale:
            raise OverflowError("value exceeds the codec range")
        return [int(v) % self.n for v in scaled.tolist()]

    def decode_vector(self, residues: Sequence[int], divisor: int = 1) -> np.ndarray:
        return np.array([self.decode(m, divisor) for m in residues], dtype=np.float64)


def check_fusion_headroom(pk: PublicKey, num_parties: int, weights: Sequence[int], max_abs: float,
                          fraction_bits: int = FRACTION_BITS) -> None:
    """Reject configurations whose weighted sum could wrap modulo ``n``."""
    bound = num_parties * max(int(w) for w in weights) * (abs(max_abs) + 1) * (1 << fraction_bits)
    if bound >= pk.n // 4:
        raise OverflowError("weighted plaintext sum may exceed n/4; use a larger key or smaller weights")


def encrypt_vector(pk: PublicKey, values, codec: FixedPointCodec | None = None) -> list[int]:
    codec = codec or FixedPointCodec(pk.n)
    return [encrypt(pk, m) for m in codec.encode_vector(values)]


def decrypt_vector(sk: PrivateKey, ciphertexts: Sequence[int], divisor: int = 1,
                   codec: FixedPointCodec | None = None) -> np.ndarray:
    codec = codec or FixedPointCodec(sk.public.n)
    return codec.decode_vector([decrypt(sk, c) for c in ciphertexts], divisor)


def fuse_encrypted(pk: PublicKey, ciphertext_vectors: Sequence[Sequence[int]], weights: Sequence[int]) -> list[int]:
    """Encrypted ``sum_i n_i * m_i`` per coordinate; decrypt then divide by ``sum(n_i)``."""
    if not ciphertext_vectors:
        raise ValueError("no ciphertext vectors to fuse")
    if len(weights) != len(ciphertext_vectors):
        raise ValueError("one weight per party is required")
    size = len(ciphertext_vectors[0])
    for i, vec in enumerate(ciphertext_vectors):
        if len(vec) != size:
            raise ValueError(f"ciphertext vector {i} has length {len(vec)}, expected {size}")
    n2 = gmpy2.mpz(pk.nsquare)
    out = []
    for j in range(size):
        acc = gmpy2.mpz(1)
        for vec, w in zip(ciphertext_vectors, weights):
            c = int(vec[j])
            _check_ciphertext(pk, c)
            acc = acc * gmpy2.powmod(c, int(w), n2) % n2
        out.append(int(acc))
    return out


# --- serialization -------------------------------------------------------

def int_to_b64(x: int) -> str:
    x = int(x)
    raw = x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")
    return base64.b64encode(raw).decode("ascii")


def b64_to_int(s: str) -> int:
    return int.from_bytes(base64.b64decode(s.encode("ascii"), validate=True), "big")


def encode_ciphertexts(cs: Sequence[int]) -> list[str]:
    return [int_to_b64(c) for c in cs]


def decode_ciphertexts(items: Sequence[str]) -> list[int]:
    return [b64_to_int(s) for s in items]


def keypair_to_json(kp: PaillierKeypair) -> str:
    sk = kp.private
    return json.dumps({"bits": kp.bits, "n": str(kp.n), "p": str(sk.p), "q": str(sk.q)}, indent=2)


def public_key_to_json(pk: PublicKey) -> str:
    return json.dumps({"n": str(pk.n)})


def keypair_from_json(text: str) -> PaillierKeypair:
    d = json.loads(text)
    kp = keypair_from_primes(int(d["p"]), int(d["q"]))
    if kp.n != int(d["n"]):
        raise ValueError("key file modulus does not match its primes")
    return kp


def public_key_from_json(text: str) -> PublicKey:
    return PublicKey(int(json.loads(text)["n"]))
