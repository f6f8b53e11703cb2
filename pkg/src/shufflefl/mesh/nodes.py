"""Attestation server, aggregator and party nodes.

Each node is driven by asyncio; state changes happen on the event loop one
message at a time, so no locking is needed inside a node.
"""
from __future__ import annotations

import asyncio
import base64
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from shufflefl import paillier
from shufflefl.attestation import (
    AggregatorCredential,
    AttestationAuthority,
    AttestationError,
    AttestationReport,
    ChallengeVerifier,
    SecretBlob,
    SecurityProcessor,
    inject_secret,
    respond,
)
from shufflefl.mesh import pipeline
from shufflefl.mesh.config import SessionConfig
from shufflefl.mesh.transport import Channel, ConnectionClosed, Network
from shufflefl.mesh.wire import ProtocolError
from shufflefl.signing import SCHEME
from shufflefl.tensor import as_parameter_vector, decode_f64, encode_f64

log = logging.getLogger(__name__)

UploadTap = Callable[[int, int, str, dict], None]


class RoundAborted(RuntimeError):
    pass


def _b64(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


def _unb64(s) -> bytes:
    if not isinstance(s, str):
        raise ProtocolError("expected a base64 string")
    try:
        return base64.b64decode(s.encode("ascii"), validate=True)
    except ValueError as exc:
        raise ProtocolError(f"bad base64: {exc}") from exc


def model_checksum(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def _field(msg: dict, name: str, kind=None):
    if name not in msg:
        raise ProtocolError(f"{msg.get('type')} message lacks {name!r}")
    value = msg[name]
    if kind is not None and not isinstance(value, kind):
        raise ProtocolError(f"{msg.get('type')}.{name} has the wrong type")
    return value


# --- attestation server --------------------------------------------------

class AttestationServerNode:
    def __init__(self, authority: AttestationAuthority, address: str, network: Network):
        self.authority = authority
        self.address = address
        self.network = network
        self.decisions: list[tuple[int, bool, str | None]] = []

    async def start(self) -> None:
        await self.network.listen(self.address, self.handle, name="attestation-server")

    async def handle(self, ch: Channel) -> None:
        while True:
            msg = await ch.recv()
            kind = msg["type"]
            if kind == "attest_report":
                try:
                    report = AttestationReport.from_wire(_field(msg, "report", dict))
                    result = self.authority.attest_platform(report)
                    agg_id = report.agg_id
                except AttestationError as exc:
                    result, agg_id = None, msg.get("report", {}).get("agg_id")
                    reason = exc.reason
                else:
                    reason = result.reason
                accepted = bool(result)
                self.decisions.append((agg_id, accepted, reason))
                await ch.send({"type": "attest_result", "agg_id": agg_id, "accepted": accepted, "reason": reason})
                if accepted:
                    await ch.send({"type": "secret_blob", "blob": result.blob.to_wire()})
            elif kind == "get_agg_key":
                agg_id = int(_field(msg, "agg_id", int))
                key = self.authority.lookup(agg_id)
                await ch.send({"type": "agg_key", "agg_id": agg_id, "scheme": SCHEME,
                               "key_b64": _b64(key) if key is not None else None})
            else:
                raise ProtocolError(f"attestation server does not accept {kind!r}")


async def fetch_agg_key(network: Network, address: str, agg_id: int, name: str = "",
                        attempts: int = 600, delay: float = 0.05) -> bytes:
    """Ask the attestation server for an aggregator's verification key, waiting
    until that aggregator has been attested."""
    ch = await network.connect(address, name=name)
    try:
        for _ in range(attempts):
            await ch.send({"type": "get_agg_key", "agg_id": agg_id})
            reply = await ch.recv()
            if reply.get("type") != "agg_key":
                raise ProtocolError(f"expected agg_key, got {reply.get('type')}")
            if reply.get("key_b64"):
                return _unb64(reply["key_b64"])
            await asyncio.sleep(delay)
    finally:
        await ch.close()
    raise AttestationError("unknown", f"aggregator {agg_id} never attested")


# --- aggregator ----------------------------------------------------------

@dataclass
class RoundTiming:
    round_id: int
    wall_ms: float


@dataclass
class _RoundBook:
    round_id: int
    uploads: dict = field(default_factory=dict)
    fused: bool = False
    followers_done: set = field(default_factory=set)
    party_checksums: dict = field(default_factory=dict)
    event: asyncio.Event = field(default_factory=asyncio.Event)


class AggregatorNode:
    def __init__(self, index: int, view: dict, network: Network, processor: SecurityProcessor,
                 upload_tap: UploadTap | None = None):
        self.index = index
        self.view = view
        self.network = network
        self.processor = processor
        self.upload_tap = upload_tap
        self.is_initiator = index == view["initiator"]
        self.address = view["aggregators"][index]
        self.partition_size = int(view["partition_size"])
        self.algorithm = view["algorithm"]
        self.byzantine_f = int(view.get("byzantine_f", 0))
        self.party_order = [p["id"] for p in view["parties"]]
        self.party_weights = {p["id"]: int(p["weight"]) for p in view["parties"]}
        self.round_timeout = float(view.get("round_timeout", 300.0))
        self.num_rounds = int(view["rounds"])
        self.pk = paillier.PublicKey(int(view["paillier_n"])) if self.algorithm == "paillier" else None

        self.credential: AggregatorCredential | None = None
        self.parties: dict[str, Channel] = {}
        self.followers: dict[int, Channel] = {}
        self.initiator_channel: Channel | None = None
        self.round_id = 0
        self.round_open = False
        self.started = False
        self.book: _RoundBook | None = None
        self._early: list[tuple[str, dict]] = []
        self.timings: list[RoundTiming] = []
        self.round_log: list[int] = []
        self.finished = asyncio.Event()
        self.error: BaseException | None = None
        self._ready = asyncio.Event()

    # phase 1
    async def attest(self) -> None:
        ch = await self.network.connect(self.view["attestation_server"], name=f"agg{self.index}")
        try:
            report = self.processor.attest(self.index, self.view)
            await ch.send({"type": "attest_report", "report": report.to_wire()})
            result = await ch.recv()
            if result.get("type") != "attest_result":
                raise ProtocolError(f"expected attest_result, got {result.get('type')}")
            if not result.get("accepted"):
                raise AttestationError(result.get("reason") or "rejected", "attestation server rejected this aggregator")
            blob_msg = await ch.recv()
            if blob_msg.get("type") != "secret_blob":
                raise ProtocolError(f"expected secret_blob, got {blob_msg.get('type')}")
            self.credential = inject_secret(SecretBlob.from_wire(_field(blob_msg, "blob", dict)), self.processor.dh_key)
        finally:
            await ch.close()

    async def start(self) -> None:
        if self.credential is None:
            await self.attest()
        await self.network.listen(self.address, self.handle, name=f"agg{self.index}")
        if not self.is_initiator:
            ch = await self.network.connect(self.view["aggregators"][self.view["initiator"]], name=f"agg{self.index}")
            await ch.send({"type": "register", "role": "aggregator", "agg_index": self.index})
            ack = await ch.recv()
            if ack.get("type") != "register_ack" or ack.get("status") != "ok":
                raise ProtocolError(f"initiator refused follower registration: {ack}")
            self.initiator_channel = ch
            asyncio.ensure_future(self._follow(ch))

    async def run(self) -> None:
        """Initiator: drive all rounds. Follower: wait for the session to end."""
        if self.is_initiator:
            try:
                await self._drive()
            except BaseException as exc:
                self.error = exc
                raise
            finally:
                self.finished.set()
        else:
            await self.finished.wait()
            if self.error is not None:
                raise self.error

    # -- connection handling
    async def handle(self, ch: Channel) -> None:
        party_id = None
        while True:
            try:
                msg = await ch.recv()
            except ConnectionClosed:
                return
            kind = msg["type"]
            if kind == "challenge":
                nonce = _unb64(_field(msg, "nonce_b64"))
                await ch.send({"type": "challenge_resp", "agg_id": self.index,
                               "signature_b64": _b64(respond(self.credential, nonce))})
            elif kind == "register" and msg.get("role", "party") == "aggregator":
                await self._register_follower(ch, msg)
                return
            elif kind == "register":
                party_id = await self._register_party(ch, msg)
            elif kind == "upload":
                if party_id is None:
                    raise ProtocolError("upload before registration")
                await self._on_upload(party_id, msg)
            elif kind == "round_done":
                if party_id is None or not self.is_initiator:
                    raise ProtocolError("unexpected round_done")
                self._on_party_done(party_id, msg)
            else:
                raise ProtocolError(f"aggregator does not accept {kind!r}")

    async def _register_party(self, ch: Channel, msg: dict) -> str:
        party_id = str(_field(msg, "party_id"))
        if party_id not in self.party_weights:
            await ch.send({"type": "register_ack", "status": "rejected", "reason": "unknown"})
            raise ProtocolError(f"unknown party {party_id!r}")
        if self.started and party_id not in self.parties:
            await ch.send({"type": "register_ack", "status": "rejected", "reason": "late"})
            raise ProtocolError(f"late registration from {party_id!r}")
        self.parties[party_id] = ch
        await ch.send({"type": "register_ack", "status": "ok", "party_id": party_id,
                       "party_index": self.party_order.index(party_id)})
        self._check_ready()
        return party_id

    async def _register_follower(self, ch: Channel, msg: dict) -> None:
        if not self.is_initiator:
            raise ProtocolError("only the initiator accepts follower registration")
        idx = int(_field(msg, "agg_index", int))
        if not 0 <= idx < len(self.view["aggregators"]) or idx == self.index:
            raise ProtocolError(f"bad follower index {idx}")
        self.followers[idx] = ch
        await ch.send({"type": "register_ack", "status": "ok", "agg_index": idx})
        self._check_ready()
        while True:
            msg = await ch.recv()
            if msg["type"] != "round_done":
                raise ProtocolError(f"follower sent {msg['type']!r}")
            self._on_follower_done(idx, msg)

    def _check_ready(self) -> None:
        expected_followers = len(self.view["aggregators"]) - 1
        if len(self.parties) == len(self.party_order) and len(self.followers) == expected_followers:
            self._ready.set()

    def registered_parties(self) -> list[str]:
        return [p for p in self.party_order if p in self.parties]

    # -- round handling
    def _open_round(self, round_id: int) -> None:
        self.started = True
        self.round_id = round_id
        self.round_open = True
        self.book = _RoundBook(round_id)
        self.round_log.append(round_id)

    def _decode_payload(self, msg: dict):
        if self.algorithm == "paillier":
            items = _field(msg, "ciphertexts", list)
            if len(items) != self.partition_size:
                raise ProtocolError(f"upload has {len(items)} ciphertexts, partition holds {self.partition_size}")
            try:
                return paillier.decode_ciphertexts(items)
            except (ValueError, TypeError) as exc:
                raise ProtocolError(f"bad ciphertext encoding: {exc}") from exc
        try:
            vec = decode_f64(_field(msg, "payload_b64", str))
            return as_parameter_vector(vec, self.partition_size)
        except ValueError as exc:
            raise ProtocolError(f"bad upload payload: {exc}") from exc

    async def _on_upload(self, party_id: str, msg: dict) -> None:
        round_id = _field(msg, "round_id", int)
        if msg.get("party_id") != party_id or msg.get("agg_index") != self.index:
            raise ProtocolError("upload addressed to the wrong party or aggregator")
        if not self.is_initiator and not self.round_open and round_id == self.round_id + 1:
            self._early.append((party_id, msg))
            return
        if not self.round_open or round_id != self.round_id:
            raise ProtocolError(f"upload for round {round_id}, current round is {self.round_id}")
        if party_id in self.book.uploads:
            raise ProtocolError(f"duplicate upload from {party_id!r} in round {round_id}")
        payload = self._decode_payload(msg)
        if self.upload_tap is not None:
            self.upload_tap(self.index, round_id, party_id, msg)
        self.book.uploads[party_id] = payload
        if len(self.book.uploads) == len(self.party_order):
            await self._fuse_and_publish()

    async def _fuse_and_publish(self) -> None:
        book = self.book
        ordered = [book.uploads[p] for p in self.party_order]
        weights = [self.party_weights[p] for p in self.party_order]
        if self.algorithm == "paillier":
            fused = paillier.fuse_encrypted(self.pk, ordered, weights)
            out = {"type": "fused", "round_id": book.round_id, "agg_index": self.index,
                   "ciphertexts": paillier.encode_ciphertexts(fused)}
        else:
            fused = pipeline.fuse_partition(self.algorithm, ordered, weights, self.byzantine_f)
            out = {"type": "fused", "round_id": book.round_id, "agg_index": self.index,
                   "payload_b64": encode_f64(fused)}
        # nothing of the parties' uploads outlives the fusion
        book.uploads.clear()
        book.fused = True
        self.round_open = False
        for p in self.party_order:
            await self.parties[p].send(out)
        if self.is_initiator:
            self._maybe_complete()
        else:
            await self.initiator_channel.send({"type": "round_done", "round_id": book.round_id,
                                               "agg_index": self.index})

    def held_payload_sizes(self) -> list[int]:
        if self.book is None:
            return []
        return [len(v) for v in self.book.uploads.values()]

    # -- follower side
    async def _follow(self, ch: Channel) -> None:
        try:
            while True:
                msg = await ch.recv()
                kind = msg["type"]
                if kind == "round_open":
                    round_id = _field(msg, "round_id", int)
                    if round_id != self.round_id + 1:
                        raise ProtocolError(f"round_open {round_id} after round {self.round_id}")
                    self._open_round(round_id)
                    early, self._early = self._early, []
                    for party_id, up in early:
                        await self._on_upload(party_id, up)
                elif kind == "abort":
                    raise RoundAborted(f"initiator aborted round {msg.get('round_id')}: {msg.get('reason')}")
                elif kind == "training_complete":
                    return
                else:
                    raise ProtocolError(f"follower does not accept {kind!r} from the initiator")
        except BaseException as exc:
            self.error = exc
        finally:
            self.finished.set()

    # -- initiator side
    def _on_follower_done(self, idx: int, msg: dict) -> None:
        if self.book is None or msg.get("round_id") != self.book.round_id:
            raise ProtocolError(f"round_done for round {msg.get('round_id')} from follower {idx}")
        self.book.followers_done.add(idx)
        self._maybe_complete()

    def _on_party_done(self, party_id: str, msg: dict) -> None:
        if self.book is None or msg.get("round_id") != self.book.round_id:
            raise ProtocolError(f"round_done for round {msg.get('round_id')} from {party_id!r}")
        self.book.party_checksums[party_id] = str(msg.get("checksum"))
        self._maybe_complete()

    def _maybe_complete(self) -> None:
        b = self.book
        if (b.fused and len(b.followers_done) == len(self.followers)
                and len(b.party_checksums) == len(self.party_order)):
            b.event.set()

    async def _broadcast(self, msg: dict) -> None:
        for ch in list(self.followers.values()) + [self.parties[p] for p in self.party_order if p in self.parties]:
            try:
                await ch.send(msg)
            except ConnectionClosed:
                pass

    async def _drive(self) -> None:
        await asyncio.wait_for(self._ready.wait(), self.round_timeout)
        for round_id in range(1, self.num_rounds + 1):
            t0 = time.perf_counter()
            self._open_round(round_id)
            for ch in self.followers.values():
                await ch.send({"type": "round_open", "round_id": round_id})
            for p in self.party_order:
                await self.parties[p].send({"type": "start_round", "round_id": round_id})
            try:
                await asyncio.wait_for(self.book.event.wait(), self.round_timeout)
            except asyncio.TimeoutError:
                await self._broadcast({"type": "abort", "round_id": round_id, "reason": "timeout"})
                raise RoundAborted(f"round {round_id} timed out")
            checksums = set(self.book.party_checksums.values())
            if len(checksums) != 1:
                await self._broadcast({"type": "abort", "round_id": round_id, "reason": "divergence"})
                raise RoundAborted(f"parties disagree on the model after round {round_id}")
            self.timings.append(RoundTiming(round_id, (time.perf_counter() - t0) * 1e3))
        await self._broadcast({"type": "training_complete", "round_id": self.round_id})


# --- party ---------------------------------------------------------------

UpdateFn = Callable[[np.ndarray, int], np.ndarray]

FOLLOWER_CLOSE_GRACE = 5.0


@dataclass
class PartyRoundRecord:
    round_id: int
    update: np.ndarray
    theta: np.ndarray


class PartyNode:
    """A data holder: trains locally, splits its update across aggregators,
    and reassembles the fused result."""

    def __init__(self, party_id: str, config: SessionConfig, network: Network, theta0: np.ndarray,
                 update_fn: UpdateFn, paillier_keypair: paillier.PaillierKeypair | None = None):
        self.party_id = party_id
        self.config = config
        self.network = network
        self.theta = as_parameter_vector(theta0, config.model_size).copy()
        self.update_fn = update_fn
        self.keypair = paillier_keypair
        self.mapper = config.mapper()
        self.key = config.permutation_key
        self.channels: dict[int, Channel] = {}
        self.verifier = ChallengeVerifier()
        self.verdicts: dict[int, object] = {}
        self.history: list[PartyRoundRecord] = []
        self.round_id = 0
        self._fused: dict[int, np.ndarray] = {}
        self._pending_update: np.ndarray | None = None
        self._inbox: asyncio.Queue = asyncio.Queue()
        if config.algorithm == "paillier":
            if paillier_keypair is None:
                raise ValueError("paillier fusion needs the shared party keypair")
            self.codec = paillier.FixedPointCodec(paillier_keypair.n)

    @property
    def mode(self) -> str:
        return pipeline.training_mode(self.config.algorithm)

    async def connect(self) -> None:
        A = self.config.num_aggregators
        order = [a for a in range(A) if a != self.config.initiator] + [self.config.initiator]
        name = f"party:{self.party_id}"
        for a in order:
            vk = await fetch_agg_key(self.network, self.config.attestation_server, a, name=name)
            ch = await self.network.connect(self.config.aggregators[a], name=name)
            nonce = self.verifier.issue_challenge(a)
            await ch.send({"type": "challenge", "agg_id": a, "nonce_b64": _b64(nonce)})
            resp = await ch.recv()
            if resp.get("type") != "challenge_resp":
                raise ProtocolError(f"expected challenge_resp, got {resp.get('type')}")
            verdict = self.verifier.verify_response(a, nonce, _unb64(resp.get("signature_b64")), vk)
            self.verdicts[a] = verdict
            if not verdict:
                await ch.close()
                raise AttestationError(verdict.reason, f"aggregator {a} failed the challenge")
            await ch.send({"type": "register", "role": "party", "party_id": self.party_id,
                           "weight": self.config.party(self.party_id).weight})
            ack = await ch.recv()
            if ack.get("type") != "register_ack" or ack.get("status") != "ok":
                await ch.close()
                raise ProtocolError(f"aggregator {a} refused registration: {ack.get('reason')}")
            self.channels[a] = ch
            asyncio.ensure_future(self._pump(a, ch))

    async def _pump(self, a: int, ch: Channel) -> None:
        try:
            while True:
                self._inbox.put_nowait((a, await ch.recv()))
        except ConnectionClosed:
            self._inbox.put_nowait((a, None))
        except ProtocolError as exc:
            self._inbox.put_nowait((a, exc))

    async def run(self) -> None:
        lost: list[int] = []
        try:
            while True:
                try:
                    a, msg = await asyncio.wait_for(self._inbox.get(), FOLLOWER_CLOSE_GRACE if lost else None)
                except asyncio.TimeoutError:
                    raise ConnectionClosed(f"aggregator {lost[0]} closed the connection") from None
                if msg is None:
                    if a == self.config.initiator:
                        raise ConnectionClosed(f"aggregator {a} closed the connection")
                    # a follower that saw abort or training_complete may hang up
                    # before the initiator's copy of that message reaches us
                    lost.append(a)
                    continue
                if isinstance(msg, Exception):
                    raise msg
                kind = msg["type"]
                if kind == "start_round":
                    await self._start_round(_field(msg, "round_id", int))
                elif kind == "fused":
                    await self._on_fused(a, msg)
                elif kind == "abort":
                    raise RoundAborted(f"round {msg.get('round_id')} aborted: {msg.get('reason')}")
                elif kind == "training_complete":
                    return
                else:
                    raise ProtocolError(f"party does not accept {kind!r}")
        finally:
            for ch in self.channels.values():
                await ch.close()

    def compute_update(self, round_id: int) -> np.ndarray:
        update = as_parameter_vector(self.update_fn(self.theta, round_id), self.config.model_size)
        if self.mode == "fedsgd":
            # aggregator sums; the n_i / n scaling turns that sum into the pooled mean
            update = (self.config.party(self.party_id).weight / self.config.total_weight) * update
        return update

    async def _start_round(self, round_id: int) -> None:
        if round_id != self.round_id + 1:
            raise ProtocolError(f"start_round {round_id} after round {self.round_id}")
        self.round_id = round_id
        self._fused = {}
        update = self.compute_update(round_id)
        self._pending_update = update
        parts = pipeline.split_update(update, self.mapper, self.key, round_id, self.config.permute)
        for a, part in enumerate(parts):
            msg = {"type": "upload", "round_id": round_id, "party_id": self.party_id, "agg_index": a}
            if self.config.algorithm == "paillier":
                msg["ciphertexts"] = paillier.encode_ciphertexts(paillier.encrypt_vector(self.keypair.public, part, self.codec))
            else:
                msg["payload_b64"] = encode_f64(part)
            await self.channels[a].send(msg)

    async def _on_fused(self, a: int, msg: dict) -> None:
        if _field(msg, "round_id", int) != self.round_id or msg.get("agg_index") != a:
            raise ProtocolError(f"fused result for round {msg.get('round_id')} from aggregator {a}")
        size = self.mapper.counts[a]
        if self.config.algorithm == "paillier":
            cts = paillier.decode_ciphertexts(_field(msg, "ciphertexts", list))
            if len(cts) != size:
                raise ProtocolError(f"fused part {a} has {len(cts)} entries, expected {size}")
            part = paillier.decrypt_vector(self.keypair.private, cts, self.config.total_weight, self.codec)
        else:
            part = decode_f64(_field(msg, "payload_b64", str))
            if part.size != size:
                raise ProtocolError(f"fused part {a} has {part.size} entries, expected {size}")
        self._fused[a] = part
        if len(self._fused) < self.config.num_aggregators:
            return
        fused = pipeline.join_fused([self._fused[i] for i in range(self.config.num_aggregators)],
                                    self.mapper, self.key, self.round_id, self.config.permute)
        self.theta = pipeline.apply_fused(self.theta, fused, self.config.algorithm, self.config.learning_rate)
        self.history.append(PartyRoundRecord(self.round_id, self._pending_update, self.theta.copy()))
        await self.channels[self.config.initiator].send({
            "type": "round_done", "round_id": self.round_id, "party_id": self.party_id,
            "checksum": model_checksum(self.theta),
        })
