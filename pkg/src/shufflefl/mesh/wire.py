"""Length-prefixed JSON framing.

A frame is a 4-byte big-endian body length followed by a UTF-8 JSON object
that carries a mandatory ``type`` field.
"""
from __future__ import annotations

import asyncio
import json
import struct

HEADER = struct.Struct(">I")
DEFAULT_MAX_BODY = 256 * 1024 * 1024

MESSAGE_TYPES = frozenset({
    "attest_report", "attest_result", "secret_blob", "get_agg_key", "agg_key",
    "challenge", "challenge_resp", "register", "register_ack", "start_round",
    "round_open", "upload", "fused", "round_done", "abort", "training_complete",
})


class ProtocolError(Exception):
    """Malformed, oversized or out-of-sequence message; the connection is dropped."""


def encode_message(msg: dict, max_body: int = DEFAULT_MAX_BODY) -> bytes:
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown or missing message type: {msg.get('type') if isinstance(msg, dict) else msg!r}")
    try:
        body = json.dumps(msg, separators=(",", ":"), allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"message is not encodable: {exc}") from exc
    if len(body) > max_body:
        raise ProtocolError(f"message body of {len(body)} bytes exceeds limit {max_body}")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> dict:
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON body: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown or missing message type in {str(msg)[:80]!r}")
    return msg


def decode_message(frame: bytes, max_body: int = DEFAULT_MAX_BODY) -> dict:
    """Decode exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise ProtocolError("truncated frame header")
    (length,) = HEADER.unpack_from(frame)
    if length > max_body:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {max_body}")
    body = frame[HEADER.size:]
    if len(body) != length:
        raise ProtocolError(f"frame declares {length} body bytes, got {len(body)}")
    return decode_body(body)


class FrameDecoder:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self, max_body: int = DEFAULT_MAX_BODY):
        self.max_body = max_body
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > self.max_body:
                raise ProtocolError(f"frame of {length} bytes exceeds limit {self.max_body}")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(decode_body(bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_frame(reader, max_body: int = DEFAULT_MAX_BODY) -> bytes:
    """Read one raw frame from an asyncio stream."""
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise ProtocolError("truncated frame header") from exc
        raise EOFError("connection closed") from exc
    (length,) = HEADER.unpack(header)
    if length > max_body:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {max_body}")
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise ProtocolError("truncated frame body") from exc
    return header + body
