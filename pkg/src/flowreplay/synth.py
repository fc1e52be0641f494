"""Synthetic TCP conversations for tests, demos and desk-scale fixtures."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .checksum import fix_checksums
from .trace import LINKTYPE_ETHERNET, PacketRecord, TcpFlags, Trace

F = TcpFlags
_MAC = {"A": bytes.fromhex("02000000000a"), "B": bytes.fromhex("02000000000b")}


_BYTE_CYCLE = bytes(range(256))


def _eth(src_is_a: bool) -> bytes:
    src, dst = (_MAC["A"], _MAC["B"]) if src_is_a else (_MAC["B"], _MAC["A"])
    return dst + src + b"\x08\x00"


@dataclass(frozen=True)
class Step:
    """One packet of a scripted conversation.

    ``from_client`` picks the direction, ``gap_us`` is the time since the
    previous packet, ``size`` the payload length.
    """

    from_client: bool
    gap_us: int
    flags: TcpFlags = F.ACK
    size: int = 0


class Conversation:
    """Builds a consistent TCP packet sequence with correct SEQ/ACK numbers."""

    def __init__(self, client: tuple[str, int], server: tuple[str, int], start_us: int,
                 client_isn: int = 1000, server_isn: int = 5000) -> None:
        self.client = client
        self.server = server
        self.ts = start_us
        self.next_seq = {True: client_isn, False: server_isn}
        self.packets: list[PacketRecord] = []
        self._ip_id = 1

    def add(self, from_client: bool, gap_us: int, flags: TcpFlags, size: int = 0,
            seq: int | None = None) -> PacketRecord:
        self.ts += gap_us
        src, dst = (self.client, self.server) if from_client else (self.server, self.client)
        seq = self.next_seq[from_client] if seq is None else seq
        ack = self.next_seq[not from_client] if F.ACK in flags else 0
        start = self._ip_id % 256
        payload = (_BYTE_CYCLE * (size // 256 + 2))[start:start + size]
        p = fix_checksums(PacketRecord(
            ts_us=self.ts, src_ip=src[0], dst_ip=dst[0], src_port=src[1], dst_port=dst[1],
            seq=seq % (1 << 32), ack=ack % (1 << 32), flags=flags, payload=payload,
            ip_id=self._ip_id, link_header=_eth(from_client),
        ))
        self._ip_id += 1
        consumed = size + (1 if F.SYN in flags else 0) + (1 if F.FIN in flags else 0)
        if seq == self.next_seq[from_client]:
            self.next_seq[from_client] = (seq + consumed) % (1 << 32)
        self.packets.append(p)
        return p

    def handshake(self, gaps: Sequence[int] = (0, 1000, 1000)) -> Conversation:
        self.add(True, gaps[0], F.SYN)
        self.add(False, gaps[1], F.SYN | F.ACK)
        self.add(True, gaps[2], F.ACK)
        return self

    def steps(self, steps: Iterable[Step]) -> Conversation:
        for st in steps:
            self.add(st.from_client, st.gap_us, st.flags, st.size)
        return self

    def retransmit_last(self, gap_us: int) -> PacketRecord:
        """Repeat the most recent packet verbatim, as a lossy original would."""
        last = self.packets[-1]
        self.ts += gap_us
        p = replace(last, ts_us=self.ts)
        self.packets.append(p)
        return p

    def close(self, gap_us: int = 1000) -> Conversation:
        self.add(True, gap_us, F.FIN | F.ACK)
        self.add(False, gap_us, F.FIN | F.ACK)
        self.add(True, gap_us, F.ACK)
        return self


def handshake_trace(start_us: int = 1_600_000_000_000_000) -> Trace:
    conv = Conversation(("10.0.0.1", 40000), ("10.0.0.2", 80), start_us).handshake()
    return Trace(tuple(conv.packets))


def interleave(*convs: Iterable[PacketRecord]) -> Trace:
    """Merge packet lists by timestamp (stable for ties)."""
    packets = sorted((p for c in convs for p in c), key=lambda p: p.ts_us)
    return Trace(tuple(packets), "us", LINKTYPE_ETHERNET)


def random_conversation(rng: random.Random, client: tuple[str, int], server: tuple[str, int],
                        start_us: int, n_data: int, max_gap_us: int = 50_000) -> Conversation:
    """Handshake, ``n_data`` request/response style packets, then a FIN exchange."""
    conv = Conversation(client, server, start_us, rng.randrange(1 << 32), rng.randrange(1 << 32))
    conv.handshake((0, rng.randint(100, max_gap_us), rng.randint(100, max_gap_us)))
    from_client = True
    # a pure ACK only follows new data from the peer, so no two packets repeat
    fresh = {True: False, False: False}
    for _ in range(n_data):
        if rng.random() < 0.4:
            from_client = not from_client
        size = rng.choice((0, rng.randint(1, 1400))) if fresh[from_client] else rng.randint(1, 1400)
        flags = F.ACK | F.PSH if size else F.ACK
        conv.add(from_client, rng.randint(0, max_gap_us), flags, size)
        fresh[from_client] = False
        if size:
            fresh[not from_client] = True
    conv.close(rng.randint(100, max_gap_us))
    return conv


def desk_trace(n_connections: int = 50, seed: int = 7, start_us: int = 1_600_000_000_000_000,
               spread_us: int = 20_000_000) -> Trace:
    """A public-capture-like mix: many hosts, varied lengths, overlapping connections."""
    rng = random.Random(seed)
    clients = [f"192.168.1.{i}" for i in range(10, 16)]
    servers = [f"10.0.{i}.1" for i in range(1, 5)]
    convs = []
    for i in range(n_connections):
        length = rng.choice((2, 8, 30, 70, 120))
        conv = random_conversation(
            rng,
            (rng.choice(clients), 40000 + i),
            (rng.choice(servers), rng.choice((80, 443, 1883, 8883))),
            start_us + rng.randint(0, spread_us),
            length,
        )
        convs.append(conv.packets)
    return interleave(*convs)
