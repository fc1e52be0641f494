"""Controller <-> agent control-channel messages.

Every message is framed as::

    u32 length | u8 tag | body[length - 1]

Integers are big-endian. Strings are UTF-8 behind a u16 length (u32 for the
larger text blocks). Tags: 1 Upload, 2 Start, 3 Status, 4 Fetch, 5 Error.
Status and Fetch with an empty body are requests; with a body they are the
agent's replies.
"""

from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass, field
from typing import Union

TAG_UPLOAD = 1
TAG_START = 2
TAG_STATUS = 3
TAG_FETCH = 4
TAG_ERROR = 5

MAX_MESSAGE = 1 << 30

PHASES = ("idle", "uploaded", "running", "finished")
CONNECTION_STATES = ("pending", "running", "completed", "timed_out", "aborted", "rejected")


class ProtocolError(ValueError):
    pass


@dataclass
class Upload:
    node_id: str
    manifest: str
    peers: str = ""
    options: str = ""
    files: dict[str, bytes] = field(default_factory=dict)


@dataclass
class Start:
    sync_epoch_us: int
    lead_time_us: int


@dataclass
class StatusRequest:
    pass


@dataclass
class ConnectionStatus:
    name: str
    initiator: bool
    state: str = "pending"
    sent: int = 0
    received: int = 0
    unexpected: int = 0
    duplicate: int = 0
    missed: int = 0
    late: int = 0
    first_send_us: int | None = None
    reason: str = ""


@dataclass
class Status:
    node_id: str = ""
    phase: str = "idle"
    agent_now_us: int = 0
    connections: list[ConnectionStatus] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.phase == "finished"


@dataclass
class FetchRequest:
    pass


@dataclass
class Capture:
    name: str
    data: bytes


@dataclass
class Error:
    text: str


Message = Union[Upload, Start, StatusRequest, Status, FetchRequest, Capture, Error]


class _Out:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("!" + fmt, *values))

    def str16(self, s: str) -> None:
        b = s.encode()
        if len(b) > 0xFFFF:
            raise ProtocolError("string too long for u16 length")
        self.pack("H", len(b))
        self.parts.append(b)

    def blob32(self, b: bytes) -> None:
        self.pack("I", len(b))
        self.parts.append(b)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _In:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        st = struct.Struct("!" + fmt)
        if self.pos + st.size > len(self.data):
            raise ProtocolError("message body truncated")
        values = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return values if len(values) > 1 else values[0]

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("message body truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def str16(self) -> str:
        return self.raw(self.unpack("H")).decode()

    def blob32(self) -> bytes:
        return self.raw(self.unpack("I"))

    def end(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing bytes in message")


def encode(msg: Message) -> bytes:
    out = _Out()
    if isinstance(msg, Upload):
        tag = TAG_UPLOAD
        out.str16(msg.node_id)
        out.blob32(msg.manifest.encode())
        out.blob32(msg.peers.encode())
        out.blob32(msg.options.encode())
        out.pack("I", len(msg.files))
        for name, data in msg.files.items():
            out.str16(name)
            out.blob32(data)
    elif isinstance(msg, Start):
        tag = TAG_START
        out.pack("QQ", msg.sync_epoch_us, msg.lead_time_us)
    elif isinstance(msg, StatusRequest):
        tag = TAG_STATUS
    elif isinstance(msg, Status):
        tag = TAG_STATUS
        out.str16(msg.node_id)
        out.pack("Bq", PHASES.index(msg.phase), msg.agent_now_us)
        out.pack("I", len(msg.connections))
        for c in msg.connections:
            out.str16(c.name)
            out.pack("BB", int(c.initiator), CONNECTION_STATES.index(c.state))
            out.pack("IIIIII", c.sent, c.received, c.unexpected, c.duplicate, c.missed, c.late)
            out.pack("q", -1 if c.first_send_us is None else c.first_send_us)
            out.str16(c.reason)
        out.pack("H", len(msg.warnings))
        for w in msg.warnings:
            out.str16(w)
    elif isinstance(msg, FetchRequest):
        tag = TAG_FETCH
    elif isinstance(msg, Capture):
        tag = TAG_FETCH
        out.str16(msg.name)
        out.blob32(msg.data)
    elif isinstance(msg, Error):
        tag = TAG_ERROR
        out.str16(msg.text[:0xFFFF])
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    body = out.bytes()
    return struct.pack("!IB", len(body) + 1, tag) + body


def decode(tag: int, body: bytes) -> Message:
    r = _In(body)
    if tag == TAG_UPLOAD:
        node = r.str16()
        manifest = r.blob32().decode()
        peers = r.blob32().decode()
        options = r.blob32().decode()
        files = {}
        for _ in range(r.unpack("I")):
            name = r.str16()
            files[name] = r.blob32()
        msg: Message = Upload(node, manifest, peers, options, files)
    elif tag == TAG_START:
        msg = Start(*r.unpack("QQ"))
    elif tag == TAG_STATUS and not body:
        msg = StatusRequest()
    elif tag == TAG_STATUS:
        node = r.str16()
        phase, now = r.unpack("Bq")
        if phase >= len(PHASES):
            raise ProtocolError(f"unknown phase {phase}")
        conns = []
        for _ in range(r.unpack("I")):
            name = r.str16()
            initiator, state = r.unpack("BB")
            if state >= len(CONNECTION_STATES):
                raise ProtocolError(f"unknown connection state {state}")
            counts = r.unpack("IIIIII")
            first = r.unpack("q")
            conns.append(ConnectionStatus(
                name, bool(initiator), CONNECTION_STATES[state], *counts,
                first_send_us=None if first < 0 else first, reason=r.str16(),
            ))
        warnings = [r.str16() for _ in range(r.unpack("H"))]
        msg = Status(node, PHASES[phase], now, conns, warnings)
    elif tag == TAG_FETCH and not body:
        msg = FetchRequest()
    elif tag == TAG_FETCH:
        msg = Capture(r.str16(), r.blob32())
    elif tag == TAG_ERROR:
        msg = Error(r.str16())
    else:
        raise ProtocolError(f"unknown message tag {tag}")
    r.end()
    return msg


def decode_frame(frame: bytes) -> Message:
    if len(frame) < 5:
        raise ProtocolError("frame shorter than header")
    length, tag = struct.unpack_from("!IB", frame)
    if length != len(frame) - 4:
        raise ProtocolError("frame length mismatch")
    return decode(tag, frame[5:])


async def read_message(reader: asyncio.StreamReader) -> Message | None:
    """Next message, or None on a clean end of stream."""
    try:
        header = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise ProtocolError("stream ended inside a frame header") from exc
    (length,) = struct.unpack("!I", header)
    if not 1 <= length <= MAX_MESSAGE:
        raise ProtocolError(f"bad frame length {length}")
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise ProtocolError("stream ended inside a frame") from exc
    return decode(payload[0], payload[1:])


async def write_message(writer, msg: Message) -> None:
    writer.write(encode(msg))
    await writer.drain()


class _MemoryWriter:
    """Writer half of an in-process byte pipe (StreamWriter subset)."""

    def __init__(self, peer: asyncio.StreamReader) -> None:
        self._peer = peer
        self._closed = False

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionResetError("pipe closed")
        self._peer.feed_data(data)

    async def drain(self) -> None:
        await asyncio.sleep(0)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._peer.feed_eof()

    def is_closing(self) -> bool:
        return self._closed

    async def wait_closed(self) -> None:
        pass


def memory_pipe():
    """Two connected (reader, writer) pairs; must be called inside a running loop."""
    a, b = asyncio.StreamReader(), asyncio.StreamReader()
    return (a, _MemoryWriter(b)), (b, _MemoryWriter(a))
