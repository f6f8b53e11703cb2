"""Two-phase trust bootstrap between parties, aggregators and the
attestation server.

Phase 1: an aggregator's (simulated) security processor produces a signed
report over the launch measurement; the attestation server checks the
platform chain, the report signature, the firmware API version and the
measurement, then delivers a fresh signing key inside an authenticated
DH-wrapped blob.

Phase 2: a party challenges each aggregator with a random nonce and checks
the signature against the verification key published by the attestation
server.

The hardware root of trust is simulated: the "root" is an ECDSA key held by
the attestation server, and the measurement is SHA-256 of the aggregator's
canonical launch configuration.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from shufflefl import signing
from shufflefl.signing import SCHEME, SignatureKeypair

NONCE_BYTES = 32
_TAG_BYTES = 16


class AttestationError(Exception):
    """Raised when a trust check fails; ``reason`` is a short code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def measure(launch_config: dict) -> bytes:
    """Launch measurement: SHA-256 of the canonical JSON configuration."""
    return hashlib.sha256(canonical_json(launch_config)).digest()


def _lp(*chunks: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(c)) + c for c in chunks)


def _b64(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


def _unb64(s: str) -> bytes:
    return base64.b64decode(s.encode("ascii"), validate=True)


def _parse_version(v: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in v.split("."))
    except ValueError as exc:
        raise AttestationError("version", f"unparseable api_version {v!r}") from exc


# --- platform side -------------------------------------------------------

@dataclass(frozen=True)
class PlatformCertificate:
    platform_key: bytes
    root_signature: bytes

    @staticmethod
    def signed_bytes(platform_key: bytes) -> bytes:
        return _lp(b"shufflefl/platform-cert/v1", platform_key)


@dataclass(frozen=True)
class AttestationReport:
    agg_id: int
    measurement: bytes
    api_version: str
    policy: int
    certificate: PlatformCertificate
    dh_public: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return _lp(
            b"shufflefl/report/v1",
            struct.pack(">Q", self.agg_id),
            self.measurement,
            self.api_version.encode("utf-8", "surrogateescape"),
            struct.pack(">q", self.policy),
            self.dh_public,
        )

    def to_wire(self) -> dict:
        return {
            "agg_id": self.agg_id,
            "measurement": _b64(self.measurement),
            "api_version": self.api_version,
            "policy": self.policy,
            "platform_key": _b64(self.certificate.platform_key),
            "cert_signature": _b64(self.certificate.root_signature),
            "dh_public": _b64(self.dh_public),
            "signature": _b64(self.signature),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "AttestationReport":
        try:
            return cls(
                agg_id=int(d["agg_id"]),
                measurement=_unb64(d["measurement"]),
                api_version=str(d["api_version"]),
                policy=int(d["policy"]),
                certificate=PlatformCertificate(_unb64(d["platform_key"]), _unb64(d["cert_signature"])),
                dh_public=_unb64(d["dh_public"]),
                signature=_unb64(d["signature"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise AttestationError("malformed", str(exc)) from exc


class SimulatedRoot:
    """Stands in for the vendor's root certificate authority."""

    def __init__(self, keypair: SignatureKeypair | None = None):
        self.keypair = keypair or SignatureKeypair.generate()

    @classmethod
    def from_seed(cls, seed: bytes) -> "SimulatedRoot":
        return cls(_keypair_from_seed(seed, b"root"))

    @property
    def verification_key(self) -> bytes:
        return self.keypair.public_bytes

    def certify(self, platform_key: bytes) -> PlatformCertificate:
        return PlatformCertificate(platform_key, self.keypair.sign(PlatformCertificate.signed_bytes(platform_key)))


def _keypair_from_seed(seed: bytes, label: bytes) -> SignatureKeypair:
    # P-256 group order
    order = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
    secret = int.from_bytes(hashlib.sha512(seed + b"/" + label).digest(), "big") % (order - 1) + 1
    return SignatureKeypair.from_secret(secret)


class SecurityProcessor:
    """Simulated per-host security processor that signs attestation reports."""

    def __init__(self, root: SimulatedRoot, api_version: str = "1.51", policy: int = 0x01,
                 platform_keypair: SignatureKeypair | None = None):
        self.platform_keypair = platform_keypair or SignatureKeypair.generate()
        self.certificate = root.certify(self.platform_keypair.public_bytes)
        self.api_version = api_version
        self.policy = policy
        self._dh = X25519PrivateKey.generate()

    @classmethod
    def from_seed(cls, root: SimulatedRoot, seed: bytes, label: str, **kwargs) -> "SecurityProcessor":
        return cls(root, platform_keypair=_keypair_from_seed(seed, b"platform/" + label.encode()), **kwargs)

    @property
    def dh_key(self) -> X25519PrivateKey:
        return self._dh

    def attest(self, agg_id: int, launch_config: dict) -> AttestationReport:
        dh_pub = self._dh.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        unsigned = AttestationReport(agg_id, measure(launch_config), self.api_version, self.policy,
                                     self.certificate, dh_pub, b"")
        return replace(unsigned, signature=self.platform_keypair.sign(unsigned.signed_bytes()))


# --- secret delivery -----------------------------------------------------

@dataclass(frozen=True)
class SecretBlob:
    agg_id: int
    server_public: bytes
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_wire(self) -> dict:
        return {
            "agg_id": self.agg_id,
            "server_public": _b64(self.server_public),
            "nonce": _b64(self.nonce),
            "ciphertext": _b64(self.ciphertext),
            "tag": _b64(self.tag),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "SecretBlob":
        try:
            return cls(int(d["agg_id"]), _unb64(d["server_public"]), _unb64(d["nonce"]),
                       _unb64(d["ciphertext"]), _unb64(d["tag"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise AttestationError("tamper", f"malformed blob: {exc}") from exc


def _blob_key(shared: bytes, agg_id: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=b"shufflefl/secret-blob/v1" + struct.pack(">Q", agg_id)).derive(shared)


def wrap_secret(agg_id: int, platform_dh_public: bytes, secret: bytes) -> SecretBlob:
    eph = X25519PrivateKey.generate()
    try:
        peer = X25519PublicKey.from_public_bytes(platform_dh_public)
    except ValueError as exc:
        raise AttestationError("malformed", "bad platform DH key") from exc
    key = _blob_key(eph.exchange(peer), agg_id)
    nonce = os.urandom(12)
    sealed = AESGCM(key).encrypt(nonce, secret, struct.pack(">Q", agg_id))
    server_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return SecretBlob(agg_id, server_pub, nonce, sealed[:-_TAG_BYTES], sealed[-_TAG_BYTES:])


@dataclass
class AggregatorCredential:
    agg_id: int
    keypair: SignatureKeypair = field(repr=False)
    scheme: str = SCHEME

    @property
    def verification_key(self) -> bytes:
        return self.keypair.public_bytes


def inject_secret(blob: SecretBlob, platform_dh_key: X25519PrivateKey) -> AggregatorCredential:
    """Unwrap the signing key delivered by the attestation server."""
    try:
        server_pub = X25519PublicKey.from_public_bytes(blob.server_public)
        key = _blob_key(platform_dh_key.exchange(server_pub), blob.agg_id)
        raw = AESGCM(key).decrypt(blob.nonce, blob.ciphertext + blob.tag, struct.pack(">Q", blob.agg_id))
        sk = signing.load_private_key(raw)
    except (InvalidTag, ValueError) as exc:
        raise AttestationError("tamper", "secret blob failed authentication") from exc
    return AggregatorCredential(blob.agg_id, SignatureKeypair(sk, sk.public_key()))


# --- attestation server logic -------------------------------------------

@dataclass(frozen=True)
class AttestResult:
    accepted: bool
    reason: str | None = None
    blob: SecretBlob | None = None

    def __bool__(self) -> bool:
        return self.accepted


class AttestationAuthority:
    """State of the attestation server: trust anchor, expectations, registry."""

    def __init__(self, root_key: bytes, expected_measurements: dict[int, bytes], min_api_version: str = "1.0"):
        self.root_key = bytes(root_key)
        self.expected = {int(k): bytes(v) for k, v in expected_measurements.items()}
        self.min_api_version = _parse_version(min_api_version)
        self.registry: dict[int, bytes] = {}

    def verify_report(self, report: AttestationReport) -> None:
        cert = report.certificate
        if not signing.verify(self.root_key, PlatformCertificate.signed_bytes(cert.platform_key), cert.root_signature):
            raise AttestationError("chain", "platform certificate not signed by the trusted root")
        if not signing.verify(cert.platform_key, report.signed_bytes(), report.signature):
            raise AttestationError("signature", "report signature invalid")
        if _parse_version(report.api_version) < self.min_api_version:
            raise AttestationError("version", f"api_version {report.api_version} below minimum")
        expected = self.expected.get(report.agg_id)
        if expected is None:
            raise AttestationError("unknown", f"no expected measurement for aggregator {report.agg_id}")
        if report.measurement != expected:
            raise AttestationError("measurement", "launch measurement mismatch")

    def attest_platform(self, report: AttestationReport) -> AttestResult:
        try:
            self.verify_report(report)
            keypair = SignatureKeypair.generate()
            blob = wrap_secret(report.agg_id, report.dh_public, signing.private_key_bytes(keypair.signing_key))
        except AttestationError as exc:
            return AttestResult(False, exc.reason)
        except (struct.error, OverflowError, UnicodeError):
            return AttestResult(False, "malformed")
        self.registry[report.agg_id] = keypair.public_bytes
        return AttestResult(True, None, blob)

    def lookup(self, agg_id: int) -> bytes | None:
        return self.registry.get(int(agg_id))


# --- phase 2: challenge / response ---------------------------------------

def _challenge_bytes(agg_id: int, nonce: bytes) -> bytes:
    return _lp(b"shufflefl/challenge/v1", struct.pack(">Q", agg_id), nonce)


def respond(credential: AggregatorCredential, nonce: bytes) -> bytes:
    return credential.keypair.sign(_challenge_bytes(credential.agg_id, nonce))


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


class ChallengeVerifier:
    """Party-side nonce book-keeping; each nonce is checked at most once."""

    def __init__(self):
        self._outstanding: dict[int, set[bytes]] = {}
        self._retired: dict[int, list[bytes]] = {}

    def issue_challenge(self, agg_id: int) -> bytes:
        nonce = os.urandom(NONCE_BYTES)
        self._outstanding.setdefault(int(agg_id), set()).add(nonce)
        return nonce

    def verify_response(self, agg_id: int, nonce: bytes, signature: bytes, verification_key: bytes | None) -> Verdict:
        agg_id = int(agg_id)
        if verification_key is None:
            return Verdict(False, "unknown")
        pending = self._outstanding.get(agg_id, set())
        if nonce not in pending:
            return Verdict(False, "replay")
        pending.discard(nonce)
        retired = self._retired.setdefault(agg_id, [])
        retired.append(nonce)
        if signing.verify(verification_key, _challenge_bytes(agg_id, nonce), signature):
            return Verdict(True)
        if any(signing.verify(verification_key, _challenge_bytes(agg_id, old), signature) for old in retired[:-1]):
            return Verdict(False, "replay")
        return Verdict(False, "signature")
