"""ECDSA P-256 signatures over arbitrary byte strings.

Signatures travel as raw ``r || s`` (64 bytes) so a flipped bit can never be
absorbed by DER re-encoding.
"""
from __future__ import annotations

from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature, encode_dss_signature

SCHEME = "ecdsa-p256-sha256"
_CURVE = ec.SECP256R1()
_COORD = 32


@dataclass(frozen=True)
class SignatureKeypair:
    signing_key: ec.EllipticCurvePrivateKey
    verification_key: ec.EllipticCurvePublicKey

    @classmethod
    def generate(cls) -> "SignatureKeypair":
        sk = ec.generate_private_key(_CURVE)
        return cls(sk, sk.public_key())

    @classmethod
    def from_secret(cls, secret: int) -> "SignatureKeypair":
        sk = ec.derive_private_key(secret, _CURVE)
        return cls(sk, sk.public_key())

    def sign(self, message: bytes) -> bytes:
        return sign(self.signing_key, message)

    @property
    def public_bytes(self) -> bytes:
        return public_key_bytes(self.verification_key)


def sign(signing_key: ec.EllipticCurvePrivateKey, message: bytes) -> bytes:
    der = signing_key.sign(message, ec.ECDSA(hashes.SHA256()))
    r, s = decode_dss_signature(der)
    return r.to_bytes(_COORD, "big") + s.to_bytes(_COORD, "big")


def verify(verification_key, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid for ``message``; never raises on bad input."""
    if isinstance(verification_key, (bytes, bytearray)):
        try:
            verification_key = load_public_key(bytes(verification_key))
        except ValueError:
            return False
    if len(signature) != 2 * _COORD:
        return False
    r = int.from_bytes(signature[:_COORD], "big")
    s = int.from_bytes(signature[_COORD:], "big")
    try:
        verification_key.verify(encode_dss_signature(r, s), message, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        return False
    return True


def public_key_bytes(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def load_public_key(raw: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, raw)


def private_key_bytes(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(serialization.Encoding.DER, serialization.PrivateFormat.PKCS8,
                             serialization.NoEncryption())


def load_private_key(raw: bytes) -> ec.EllipticCurvePrivateKey:
    key = serialization.load_der_private_key(raw, password=None)
    if not isinstance(key, ec.EllipticCurvePrivateKey):
        raise ValueError("not an EC private key")
    return key
