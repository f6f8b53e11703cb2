"""Message channels over TCP or in-process queues.

Both transports move encoded frames, so the in-memory path exercises the
same wire contract as the networked one.
"""
from __future__ import annotations

import asyncio
import logging
from typing import Awaitable, Callable

from shufflefl.mesh.wire import DEFAULT_MAX_BODY, ProtocolError, decode_message, encode_message, read_frame

log = logging.getLogger(__name__)

Handler = Callable[["Channel"], Awaitable[None]]
Tap = Callable[[str, str, bytes], None]


class ConnectionClosed(EOFError):
    pass


class Channel:
    """Bidirectional message channel; ``peer`` is a label for logs and taps."""

    local: str = "?"
    peer: str = "?"

    async def send(self, msg: dict) -> None:
        raise NotImplementedError

    async def recv(self) -> dict:
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError


class StreamChannel(Channel):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 max_body: int = DEFAULT_MAX_BODY, local: str = "?", tap: Tap | None = None):
        self.reader = reader
        self.writer = writer
        self.max_body = max_body
        self.local = local
        peer = writer.get_extra_info("peername")
        self.peer = f"{peer[0]}:{peer[1]}" if peer else "?"
        self.tap = tap
        self._lock = asyncio.Lock()

    async def send(self, msg: dict) -> None:
        frame = encode_message(msg, self.max_body)
        if self.tap:
            self.tap(self.local, self.peer, frame)
        async with self._lock:
            self.writer.write(frame)
            await self.writer.drain()

    async def recv(self) -> dict:
        try:
            frame = await read_frame(self.reader, self.max_body)
        except EOFError as exc:
            raise ConnectionClosed(str(exc)) from exc
        except ConnectionError as exc:
            raise ConnectionClosed(str(exc)) from exc
        return decode_message(frame, self.max_body)

    async def close(self) -> None:
        if not self.writer.is_closing():
            self.writer.close()
            try:
                await self.writer.wait_closed()
            except (ConnectionError, OSError):
                pass


_EOF = object()


class MemoryChannel(Channel):
    def __init__(self, local: str, peer: str, max_body: int, tap: Tap | None):
        self.local = local
        self.peer = peer
        self.max_body = max_body
        self.tap = tap
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.other: MemoryChannel | None = None
        self.closed = False

    async def send(self, msg: dict) -> None:
        if self.closed or self.other is None or self.other.closed:
            raise ConnectionClosed(f"{self.local} -> {self.peer} is closed")
        frame = encode_message(msg, self.max_body)
        if self.tap:
            self.tap(self.local, self.peer, frame)
        self.other.inbox.put_nowait(frame)

    async def recv(self) -> dict:
        if self.closed:
            raise ConnectionClosed("channel closed")
        frame = await self.inbox.get()
        if frame is _EOF:
            self.closed = True
            raise ConnectionClosed(f"{self.peer} closed the connection")
        return decode_message(frame, self.max_body)

    async def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.inbox.put_nowait(_EOF)
        if self.other is not None and not self.other.closed:
            self.other.inbox.put_nowait(_EOF)


def memory_pipe(a: str, b: str, max_body: int = DEFAULT_MAX_BODY, tap: Tap | None = None) -> tuple[MemoryChannel, MemoryChannel]:
    left = MemoryChannel(a, b, max_body, tap)
    right = MemoryChannel(b, a, max_body, tap)
    left.other, right.other = right, left
    return left, right


class Network:
    """Address book that can listen on and connect to ``host:port`` strings."""

    async def listen(self, address: str, handler: Handler, name: str = "") -> None:
        raise NotImplementedError

    async def connect(self, address: str, name: str = "", retries: int = 50, delay: float = 0.1) -> Channel:
        raise NotImplementedError

    async def shutdown(self) -> None:
        pass


def _spawn_handler(handler: Handler, channel: Channel, tasks: set) -> None:
    async def run():
        try:
            await handler(channel)
        except ConnectionClosed:
            pass
        except ProtocolError as exc:
            log.warning("protocol error from %s: %s", channel.peer, exc)
        finally:
            await channel.close()

    task = asyncio.ensure_future(run())
    tasks.add(task)
    task.add_done_callback(tasks.discard)


class MemoryNetwork(Network):
    """In-process network; optionally records every frame for inspection."""

    def __init__(self, max_body: int = DEFAULT_MAX_BODY, capture: bool = False):
        self.max_body = max_body
        self._listeners: dict[str, tuple[Handler, str]] = {}
        self._tasks: set = set()
        self.frames: list[tuple[str, str, bytes]] | None = [] if capture else None

    def _tap(self, src: str, dst: str, frame: bytes) -> None:
        if self.frames is not None:
            self.frames.append((src, dst, frame))

    async def listen(self, address: str, handler: Handler, name: str = "") -> None:
        if address in self._listeners:
            raise OSError(f"address {address} already in use")
        self._listeners[address] = (handler, name or address)

    async def connect(self, address: str, name: str = "", retries: int = 50, delay: float = 0.1) -> Channel:
        for attempt in range(retries + 1):
            if address in self._listeners:
                break
            if attempt == retries:
                raise ConnectionRefusedError(f"nothing listening on {address}")
            await asyncio.sleep(delay)
        handler, server_name = self._listeners[address]
        client, server = memory_pipe(name or "client", server_name, self.max_body, self._tap)
        _spawn_handler(handler, server, self._tasks)
        return client

    async def shutdown(self) -> None:
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._listeners.clear()


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port:
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


class TcpNetwork(Network):
    def __init__(self, max_body: int = DEFAULT_MAX_BODY):
        self.max_body = max_body
        self._servers: list[asyncio.base_events.Server] = []
        self._tasks: set = set()

    async def listen(self, address: str, handler: Handler, name: str = "") -> None:
        host, port = split_address(address)

        async def on_connect(reader, writer):
            channel = StreamChannel(reader, writer, self.max_body, local=name or address)
            _spawn_handler(handler, channel, self._tasks)

        server = await asyncio.start_server(on_connect, host, port)
        self._servers.append(server)

    async def connect(self, address: str, name: str = "", retries: int = 50, delay: float = 0.1) -> Channel:
        host, port = split_address(address)
        for attempt in range(retries + 1):
            try:
                reader, writer = await asyncio.open_connection(host, port)
                return StreamChannel(reader, writer, self.max_body, local=name)
            except OSError:
                if attempt == retries:
                    raise
                await asyncio.sleep(delay)
        raise ConnectionRefusedError(address)

    async def shutdown(self) -> None:
        for s in self._servers:
            s.close()
            await s.wait_closed()
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
