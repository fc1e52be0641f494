"""Packet records, traces and classic libpcap file I/O.

Only IPv4/TCP is modelled. Every other record in a capture is skipped and
counted on the resulting :class:`Trace`.
"""

from __future__ import annotations

import enum
import io
import ipaddress
import os
import socket
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, NamedTuple, Union

PathLike = Union[str, os.PathLike]

LINKTYPE_ETHERNET = 1
LINKTYPE_LINUX_SLL = 113

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D

_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_VLAN = (0x8100, 0x88A8)

# Synthetic Ethernet header used for packets that arrive without one
# (datagram carriage only transports the IP packet).
SYNTHETIC_ETHERNET = bytes(12) + struct.pack("!H", _ETHERTYPE_IPV4)


class PcapError(ValueError):
    """Malformed capture file."""


class PcapTruncatedError(PcapError):
    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"record {index}: {message}")
        self.index = index


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80

    def __str__(self) -> str:
        names = [f.name for f in TcpFlags if f in self]
        return "+".join(names) if names else "-"


@dataclass(frozen=True)
class PacketRecord:
    """One captured IPv4/TCP packet.

    ``ts_us`` is the capture timestamp in microseconds since the Unix epoch.
    ``link_header`` holds the raw bytes preceding the IP header (empty for
    packets that were never framed). Checksums are stored as found; use
    :func:`flowreplay.checksum.fix_checksums` after rewriting fields.
    """

    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: TcpFlags
    payload: bytes = b""
    window: int = 65535
    urgent: int = 0
    tcp_options: bytes = b""
    tcp_reserved: int = 0
    ip_id: int = 0
    ttl: int = 64
    tos: int = 0
    ip_frag: int = 0x4000
    ip_options: bytes = b""
    ip_checksum: int = 0
    tcp_checksum: int = 0
    link_header: bytes = b""

    def __post_init__(self) -> None:
        if self.ts_us < 0:
            raise ValueError("ts_us must be >= 0")
        if len(self.ip_options) % 4 or len(self.tcp_options) % 4:
            raise ValueError("IP/TCP options must be padded to 32-bit words")
        if not isinstance(self.flags, TcpFlags):
            object.__setattr__(self, "flags", TcpFlags(self.flags))

    @property
    def ip_header_len(self) -> int:
        return 20 + len(self.ip_options)

    @property
    def tcp_header_len(self) -> int:
        return 20 + len(self.tcp_options)

    @property
    def raw_len(self) -> int:
        return len(self.link_header) + self.ip_header_len + self.tcp_header_len + len(self.payload)

    def ip_header(self) -> bytes:
        total = self.ip_header_len + self.tcp_header_len + len(self.payload)
        return struct.pack(
            "!BBHHHBBH4s4s",
            0x40 | (self.ip_header_len // 4),
            self.tos,
            total,
            self.ip_id,
            self.ip_frag,
            self.ttl,
            socket.IPPROTO_TCP,
            self.ip_checksum,
            socket.inet_aton(self.src_ip),
            socket.inet_aton(self.dst_ip),
        ) + self.ip_options

    def tcp_segment(self) -> bytes:
        offset_byte = ((self.tcp_header_len // 4) << 4) | (self.tcp_reserved & 0x0F)
        return struct.pack(
            "!HHIIBBHHH",
            self.src_port,
            self.dst_port,
            self.seq,
            self.ack,
            offset_byte,
            int(self.flags),
            self.window,
            self.tcp_checksum,
            self.urgent,
        ) + self.tcp_options + self.payload

    def ip_bytes(self) -> bytes:
        """The IPv4 packet, without link header."""
        return self.ip_header() + self.tcp_segment()

    def frame_bytes(self) -> bytes:
        return self.link_header + self.ip_bytes()

    def reversed(self) -> PacketRecord:
        return replace(
            self,
            src_ip=self.dst_ip,
            dst_ip=self.src_ip,
            src_port=self.dst_port,
            dst_port=self.src_port,
        )

    @classmethod
    def from_ip_bytes(cls, data: bytes, ts_us: int, link_header: bytes = b"") -> PacketRecord:
        """Parse an IPv4/TCP packet. Raises ``ValueError`` on anything else."""
        if len(data) < 20:
            raise ValueError("short IPv4 header")
        ver_ihl, tos, total, ip_id, frag, ttl, proto, ip_sum, src, dst = struct.unpack_from(
            "!BBHHHBBH4s4s", data
        )
        if ver_ihl >> 4 != 4:
            raise ValueError("not IPv4")
        ihl = (ver_ihl & 0x0F) * 4
        if ihl < 20 or total < ihl or total > len(data):
            raise ValueError("bad IPv4 lengths")
        if proto != socket.IPPROTO_TCP:
            raise ValueError("not TCP")
        if frag & 0x3FFF:
            raise ValueError("IP fragment")
        if total - ihl < 20:
            raise ValueError("short TCP header")
        sport, dport, seq, ack, off, flags, win, tcp_sum, urg = struct.unpack_from("!HHIIBBHHH", data, ihl)
        thl = (off >> 4) * 4
        if thl < 20 or ihl + thl > total:
            raise ValueError("bad TCP header length")
        return cls(
            ts_us=ts_us,
            src_ip=socket.inet_ntoa(src),
            dst_ip=socket.inet_ntoa(dst),
            src_port=sport,
            dst_port=dport,
            seq=seq,
            ack=ack,
            flags=TcpFlags(flags),
            payload=bytes(data[ihl + thl : total]),
            window=win,
            urgent=urg,
            tcp_options=bytes(data[ihl + 20 : ihl + thl]),
            tcp_reserved=off & 0x0F,
            ip_id=ip_id,
            ttl=ttl,
            tos=tos,
            ip_frag=frag,
            ip_options=bytes(data[20:ihl]),
            ip_checksum=ip_sum,
            tcp_checksum=tcp_sum,
            link_header=bytes(link_header),
        )


class FlowKey(NamedTuple):
    """Direction-independent 4-tuple; the lower (ip, port) endpoint comes first."""

    ip_a: str
    port_a: int
    ip_b: str
    port_b: int


def _endpoint_order(ip: str, port: int) -> tuple[int, int]:
    return int(ipaddress.IPv4Address(ip)), port


def flow_key(p: PacketRecord) -> FlowKey:
    a = (p.src_ip, p.src_port)
    b = (p.dst_ip, p.dst_port)
    if _endpoint_order(*b) < _endpoint_order(*a):
        a, b = b, a
    return FlowKey(a[0], a[1], b[0], b[1])


def duplicate_key(p: PacketRecord) -> tuple:
    """Identity under which the replay engine cannot tell two packets apart."""
    ack = p.ack if TcpFlags.ACK in p.flags else None
    return (p.src_ip, p.src_port, p.seq, ack, int(p.flags), len(p.payload))


@dataclass(frozen=True)
class Trace:
    packets: tuple[PacketRecord, ...] = ()
    ts_resolution: str = "us"
    link_type: int = LINKTYPE_ETHERNET
    skipped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.packets, tuple):
            object.__setattr__(self, "packets", tuple(self.packets))
        if self.ts_resolution not in ("us", "ns"):
            raise ValueError("ts_resolution must be 'us' or 'ns'")

    def __len__(self) -> int:
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)


def _split_link(link_type: int, frame: bytes) -> tuple[bytes, bytes] | None:
    """Return (link header, IP payload) or None if the frame is not IPv4."""
    if link_type == LINKTYPE_ETHERNET:
        pos = 12
        if len(frame) < 14:
            return None
        ethertype = struct.unpack_from("!H", frame, pos)[0]
        while ethertype in _ETHERTYPE_VLAN:
            pos += 4
            if len(frame) < pos + 2:
                return None
            ethertype = struct.unpack_from("!H", frame, pos)[0]
        pos += 2
    elif link_type == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            return None
        ethertype = struct.unpack_from("!H", frame, 14)[0]
        pos = 16
    else:
        raise PcapError(f"unsupported link type {link_type}")
    if ethertype != _ETHERTYPE_IPV4:
        return None
    return frame[:pos], frame[pos:]


def parse_pcap(data: bytes) -> Trace:
    if len(data) < 24:
        raise PcapError("missing pcap global header")
    magic_le = struct.unpack_from("<I", data)[0]
    if magic_le in (MAGIC_US, MAGIC_NS):
        endian = "<"
    elif struct.unpack_from(">I", data)[0] in (MAGIC_US, MAGIC_NS):
        endian = ">"
    else:
        raise PcapError(f"bad pcap magic 0x{magic_le:08x}")
    magic, _vmaj, _vmin, _zone, _sigfigs, _snap, link_type = struct.unpack_from(endian + "IHHiIII", data)
    nanos = magic == MAGIC_NS
    link_type &= 0x0FFFFFFF
    if link_type not in (LINKTYPE_ETHERNET, LINKTYPE_LINUX_SLL):
        raise PcapError(f"unsupported link type {link_type}")

    packets = []
    skipped = 0
    pos = 24
    index = 0
    rec = struct.Struct(endian + "IIII")
    while pos < len(data):
        if pos + 16 > len(data):
            raise PcapTruncatedError(index, "truncated record header")
        sec, frac, incl, _orig = rec.unpack_from(data, pos)
        pos += 16
        if pos + incl > len(data):
            raise PcapTruncatedError(index, f"record data needs {incl} bytes, {len(data) - pos} left")
        frame = data[pos : pos + incl]
        pos += incl
        ts_us = sec * 1_000_000 + (frac // 1000 if nanos else frac)
        split = _split_link(link_type, frame)
        if split is None:
            skipped += 1
        else:
            try:
                packets.append(PacketRecord.from_ip_bytes(split[1], ts_us, split[0]))
            except ValueError:
                skipped += 1
        index += 1
    return Trace(tuple(packets), "ns" if nanos else "us", link_type, skipped)


def read_pcap(path: PathLike) -> Trace:
    """Load every IPv4/TCP record of a classic pcap file, in file order."""
    with open(path, "rb") as fh:
        return parse_pcap(fh.read())


def _pcap_bytes(packets: Iterable[PacketRecord], link_type: int) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<IHHiIII", MAGIC_US, 2, 4, 0, 0, 262144, link_type))
    for p in packets:
        frame = p.frame_bytes()
        sec, usec = divmod(p.ts_us, 1_000_000)
        out.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        out.write(frame)
    return out.getvalue()


def pcap_bytes(trace: Trace) -> bytes:
    return _pcap_bytes(trace.packets, trace.link_type)


def write_pcap(trace: Trace, path: PathLike | BinaryIO) -> None:
    """Write ``trace`` as a little-endian microsecond pcap."""
    data = pcap_bytes(trace)
    if hasattr(path, "write"):
        path.write(data)
        return
    with open(path, "wb") as fh:
        fh.write(data)
