"""Internet checksum (RFC 1071) for IPv4 headers and TCP segments."""

from __future__ import annotations

import socket
import struct
from dataclasses import replace

from .trace import PacketRecord


def internet_checksum(data: bytes) -> int:
    """Ones-complement of the ones-complement sum of 16-bit big-endian words."""
    if len(data) % 2:
        data = data + b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _pseudo_header(p: PacketRecord, tcp_len: int) -> bytes:
    return (
        socket.inet_aton(p.src_ip)
        + socket.inet_aton(p.dst_ip)
        + struct.pack("!BBH", 0, socket.IPPROTO_TCP, tcp_len)
    )


def ip_header_checksum(p: PacketRecord) -> int:
    return internet_checksum(replace(p, ip_checksum=0).ip_header())


def tcp_checksum(p: PacketRecord) -> int:
    segment = replace(p, tcp_checksum=0).tcp_segment()
    return internet_checksum(_pseudo_header(p, len(segment)) + segment)


def fix_checksums(p: PacketRecord) -> PacketRecord:
    z = replace(p, ip_checksum=0, tcp_checksum=0)
    segment = z.tcp_segment()
    return replace(
        z,
        ip_checksum=internet_checksum(z.ip_header()),
        tcp_checksum=internet_checksum(_pseudo_header(p, len(segment)) + segment),
    )


def checksums_valid(p: PacketRecord) -> bool:
    segment = p.tcp_segment()
    return (
        internet_checksum(p.ip_header()) == 0
        and internet_checksum(_pseudo_header(p, len(segment)) + segment) == 0
    )
