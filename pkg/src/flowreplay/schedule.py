"""Replay schedules: one connection rewritten for one side of the replay.

Each entry is either sent by this side (``LOCAL``) or expected from the peer
(``REMOTE``). Local sequence numbers are shifted by a random offset; once the
peer's real initial sequence number is seen, :func:`rebase_remote` shifts the
acknowledgements of local packets and the expected sequence numbers of remote
packets by the same delta. Every rewritten value is recomputed from the
original packet, never accumulated.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

from .checksum import fix_checksums, internet_checksum
from .splitter import ConnectionTrace
from .trace import PacketRecord, TcpFlags, duplicate_key

MOD32 = 1 << 32

__all__ = [
    "AwaitRemote",
    "Direction",
    "Done",
    "RebaseError",
    "Schedule",
    "ScheduleEntry",
    "SendAt",
    "build_schedule",
    "fix_checksums",
    "internet_checksum",
    "match_key",
    "next_due",
    "rebase_remote",
    "without_duplicates",
]


class Direction(enum.Enum):
    LOCAL = "local"
    REMOTE = "remote"


class RebaseError(RuntimeError):
    pass


@dataclass
class ScheduleEntry:
    direction: Direction
    packet: PacketRecord
    due_us: int
    expected_seq: int
    expected_ack: int
    original: PacketRecord = field(repr=False)

    @property
    def is_local(self) -> bool:
        return self.direction is Direction.LOCAL


@dataclass
class Schedule:
    entries: list[ScheduleEntry]
    local_seq_offset: int
    local_ip: str
    remote_ip: str
    replay_port: int
    start_epoch_us: int
    initiator: bool
    remote_isn: int | None = None
    anchor_index: int | None = None
    remote_rebase: int | None = None
    cursor: int = 0
    _index: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.entries)

    @property
    def current(self) -> ScheduleEntry | None:
        return None if self.done else self.entries[self.cursor]

    def advance(self, to: int | None = None) -> None:
        target = self.cursor + 1 if to is None else to
        if target < self.cursor or target > len(self.entries):
            raise ValueError(f"cursor cannot move from {self.cursor} to {target}")
        self.cursor = target

    def absolute_due(self, index: int) -> int:
        return self.start_epoch_us + self.entries[index].due_us

    def drop_duplicates(self) -> int:
        """Remove entries the peer could not tell apart from an earlier one."""
        if self.cursor or self.remote_rebase is not None:
            raise RebaseError("duplicates can only be dropped before replay starts")
        seen: set = set()
        kept = []
        for e in self.entries:
            key = duplicate_key(e.original)
            if key in seen:
                continue
            seen.add(key)
            kept.append(e)
        removed = len(self.entries) - len(kept)
        self.entries = kept
        self._index = None
        self._find_anchor()
        return removed

    def remote_index(self) -> dict[tuple, list[int]]:
        """Remote entry indices grouped by :func:`match_key` of their expected packet."""
        if self._index is None:
            index: dict[tuple, list[int]] = {}
            for i, e in enumerate(self.entries):
                if not e.is_local:
                    index.setdefault(match_key(e.packet), []).append(i)
            self._index = index
        return self._index

    def _find_anchor(self) -> None:
        self.anchor_index = next(
            (i for i, e in enumerate(self.entries) if not e.is_local and TcpFlags.SYN in e.original.flags),
            next((i for i, e in enumerate(self.entries) if not e.is_local), None),
        )
        self.remote_isn = None if self.anchor_index is None else self.entries[self.anchor_index].original.seq

    def render(self, entry: ScheduleEntry) -> None:
        o = entry.original
        delta = self.remote_rebase or 0
        has_ack = TcpFlags.ACK in o.flags
        if entry.is_local:
            seq = (o.seq + self.local_seq_offset) % MOD32
            ack = (o.ack + delta) % MOD32 if has_ack else o.ack
            src, dst = self.local_ip, self.remote_ip
        else:
            seq = (o.seq + delta) % MOD32
            ack = (o.ack + self.local_seq_offset) % MOD32 if has_ack else o.ack
            src, dst = self.remote_ip, self.local_ip
        entry.packet = fix_checksums(
            replace(
                o,
                src_ip=src,
                dst_ip=dst,
                src_port=self.replay_port,
                dst_port=self.replay_port,
                seq=seq,
                ack=ack,
            )
        )
        entry.expected_seq = seq
        entry.expected_ack = ack


def build_schedule(
    c: ConnectionTrace,
    initiator: bool,
    local_ip: str,
    remote_ip: str,
    start_epoch_us: int,
    rng_seed: int | str | None = None,
) -> Schedule:
    """Rewrite ``c`` for the side that owns ``local_ip``.

    ``initiator`` selects which original endpoint is local: the connection's
    initiator when true, its responder otherwise.
    """
    local_orig = c.initiator_ip if initiator else c.responder_ip
    offset = random.Random(rng_seed).randint(1, MOD32 - 1)
    port = c.replay_port or c.packets[0].dst_port
    s = Schedule(
        entries=[],
        local_seq_offset=offset,
        local_ip=local_ip,
        remote_ip=remote_ip,
        replay_port=port,
        start_epoch_us=start_epoch_us,
        initiator=initiator,
    )
    t0 = c.packets[0].ts_us if c.packets else 0
    due = 0
    for p in c.packets:
        due = max(due, p.ts_us - t0)
        direction = Direction.LOCAL if p.src_ip == local_orig else Direction.REMOTE
        entry = ScheduleEntry(direction, p, due, 0, 0, original=p)
        s.render(entry)
        s.entries.append(entry)
    s._find_anchor()
    return s


def rebase_remote(s: Schedule, observed_remote_seq: int) -> None:
    """Anchor the peer's sequence space on its observed initial sequence number."""
    if s.remote_rebase is not None:
        raise RebaseError("schedule already rebased")
    isn = s.remote_isn if s.remote_isn is not None else observed_remote_seq
    s.remote_rebase = (observed_remote_seq - isn) % MOD32
    for e in s.entries:
        s.render(e)
    s._index = None


def match_key(p: PacketRecord) -> tuple:
    """Fields an incoming packet must share with its schedule entry."""
    ack = p.ack if TcpFlags.ACK in p.flags else None
    return (int(p.flags), len(p.payload), p.seq, ack)


@dataclass(frozen=True)
class SendAt:
    at_us: int


@dataclass(frozen=True)
class AwaitRemote:
    pass


@dataclass(frozen=True)
class Done:
    pass


NextAction = Union[SendAt, AwaitRemote, Done]


def next_due(s: Schedule, now_epoch_us: int | None = None) -> NextAction:
    """What the engine should do next; depends only on the cursor."""
    entry = s.current
    if entry is None:
        return Done()
    if entry.is_local:
        return SendAt(s.start_epoch_us + entry.due_us)
    return AwaitRemote()


def without_duplicates(packets: Sequence[PacketRecord]) -> list[PacketRecord]:
    """Packets minus those indistinguishable from an earlier one (see :func:`duplicate_key`)."""
    seen: set = set()
    out = []
    for p in packets:
        key = duplicate_key(p)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out
