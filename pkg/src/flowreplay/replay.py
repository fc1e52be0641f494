"""The per-connection replay engine.

One coroutine drives one :class:`~flowreplay.schedule.Schedule` over a
:class:`~flowreplay.harness.Channel`. It waits for whichever comes first,
the next local send deadline or the next incoming packet, so packets are
never held back while a send is pending.
"""

from __future__ import annotations

import bisect
import enum
import logging
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from .clock import sleep_until
from .harness import Channel, TransportClosed
from .schedule import Schedule, ScheduleEntry, match_key, rebase_remote
from .trace import PacketRecord, TcpFlags

logger = logging.getLogger(__name__)

__all__ = [
    "Classification",
    "DuplicatePolicy",
    "Match",
    "ReplayConfig",
    "ReplayOutcome",
    "ReplayStatus",
    "classify_incoming",
    "run_connection",
    "sleep_until",
]


class DuplicatePolicy(enum.Enum):
    STRICT = "strict"
    DROP_SCHEDULED_DUPLICATES = "drop-duplicates"


@dataclass(frozen=True)
class ReplayConfig:
    inactivity_timeout_us: int = 10_000_000
    duplicate_policy: DuplicatePolicy = DuplicatePolicy.STRICT
    max_clock_slip_us: int = 1_000

    def __post_init__(self) -> None:
        if self.inactivity_timeout_us <= 0:
            raise ValueError("inactivity_timeout_us must be > 0")


class ReplayStatus(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    TIMED_OUT = "timed_out"
    ABORTED = "aborted"

    @property
    def terminal(self) -> bool:
        return self in (ReplayStatus.COMPLETED, ReplayStatus.TIMED_OUT, ReplayStatus.ABORTED)


@dataclass
class ReplayOutcome:
    status: ReplayStatus = ReplayStatus.PENDING
    reason: str = ""
    sent_count: int = 0
    received_count: int = 0
    unexpected_count: int = 0
    duplicate_count: int = 0
    missed_count: int = 0
    late_sends: int = 0
    dropped_duplicates: int = 0
    # epoch microseconds per schedule entry: send time (local) or receive time (remote)
    times_us: list[int | None] = field(default_factory=list)
    first_send_us: int | None = None


class Match(enum.Enum):
    EXPECTED = "expected"
    SCHEDULED_LATER = "scheduled_later"
    DUPLICATE_OF_PAST = "duplicate_of_past"
    UNEXPECTED = "unexpected"


class Classification(NamedTuple):
    kind: Match
    index: int | None = None


def _anchor_matches(s: Schedule, p: PacketRecord) -> bool:
    # the peer's initial sequence number is unknown until this packet arrives
    want = s.entries[s.cursor].packet
    if int(p.flags) != int(want.flags) or len(p.payload) != len(want.payload):
        return False
    return TcpFlags.ACK not in want.flags or p.ack == want.ack


def classify_incoming(s: Schedule, p: PacketRecord) -> Classification:
    """Place an incoming packet relative to the schedule cursor.

    Already-consumed entries are checked first, so a packet that matches both
    a consumed entry and the cursor counts as a duplicate. A capture that
    itself contains retransmissions therefore stalls strict replay.
    """
    hits = s.remote_index().get(match_key(p), ())
    pos = bisect.bisect_left(hits, s.cursor)
    if pos:
        return Classification(Match.DUPLICATE_OF_PAST, hits[pos - 1])
    if not s.done:
        if pos < len(hits) and hits[pos] == s.cursor:
            return Classification(Match.EXPECTED, s.cursor)
        if s.remote_rebase is None and s.cursor == s.anchor_index and _anchor_matches(s, p):
            return Classification(Match.EXPECTED, s.cursor)
    later = pos + 1 if pos < len(hits) and hits[pos] == s.cursor else pos
    if later < len(hits):
        return Classification(Match.SCHEDULED_LATER, hits[later])
    return Classification(Match.UNEXPECTED)


class _Engine:
    def __init__(self, s: Schedule, channel: Channel, clock: Any, cfg: ReplayConfig,
                 outcome: ReplayOutcome) -> None:
        self.s = s
        self.channel = channel
        self.clock = clock
        self.cfg = cfg
        self.out = outcome
        self.missed: set[int] = set()
        self.pending: list[tuple[int, PacketRecord]] = []
        self.last_activity = s.start_epoch_us

    def _consume(self, index: int, ts: int, p: PacketRecord) -> None:
        if self.s.remote_rebase is None and index == self.s.anchor_index:
            rebase_remote(self.s, p.seq)
        self.out.times_us[index] = ts
        self.out.received_count += 1
        self.s.advance(index + 1)

    def _skip_to(self, index: int) -> bool:
        """Fast-forward over remote entries up to ``index``; False if a local entry is in the way."""
        between = range(self.s.cursor, index)
        if any(self.s.entries[i].is_local for i in between):
            return False
        for i in between:
            self.missed.add(i)
        self.out.missed_count = len(self.missed)
        if between:
            logger.debug("port %d: missed entries %s", self.s.replay_port, list(between))
        return True

    def handle(self, ts: int, p: PacketRecord) -> str | None:
        """Process one incoming packet; returns an abort reason or None."""
        kind, index = classify_incoming(self.s, p)
        if kind is Match.EXPECTED:
            self._consume(index, ts, p)
            self._drain_pending()
        elif kind is Match.SCHEDULED_LATER:
            if self._skip_to(index):
                self._consume(index, ts, p)
                self._drain_pending()
            else:
                self.pending.append((ts, p))
        elif kind is Match.DUPLICATE_OF_PAST:
            self.out.duplicate_count += 1
            if index in self.missed:
                self.missed.discard(index)
                self.out.missed_count = len(self.missed)
                self.out.times_us[index] = ts
                self.out.received_count += 1
        else:
            if TcpFlags.RST in p.flags:
                return "reset"
            self.out.unexpected_count += 1
        return None

    def _drain_pending(self) -> None:
        while self.pending:
            retry, self.pending = self.pending, []
            progressed = False
            for ts, p in retry:
                kind, index = classify_incoming(self.s, p)
                if kind is Match.EXPECTED or (kind is Match.SCHEDULED_LATER and self._skip_to(index)):
                    self._consume(index, ts, p)
                    progressed = True
                elif kind is Match.SCHEDULED_LATER:
                    self.pending.append((ts, p))
                elif kind is Match.DUPLICATE_OF_PAST:
                    self.out.duplicate_count += 1
                else:
                    self.out.unexpected_count += 1
            if not progressed:
                break

    def send(self, entry: ScheduleEntry, due: int) -> None:
        now = self.clock.now_us()
        self.channel.send(entry.packet.ip_bytes())
        self.out.times_us[self.s.cursor] = now
        if self.out.first_send_us is None:
            self.out.first_send_us = now
        self.out.sent_count += 1
        if now - due > self.cfg.max_clock_slip_us:
            self.out.late_sends += 1
        self.s.advance()
        self.last_activity = now

    async def run(self) -> None:
        s, out = self.s, self.out
        await sleep_until(self.clock, s.start_epoch_us)
        self.last_activity = self.clock.now_us()
        while not s.done:
            entry = s.current
            now = self.clock.now_us()
            if entry.is_local:
                due = s.absolute_due(s.cursor)
                if now >= due:
                    self.send(entry, due)
                    continue
                deadline = due
            else:
                expected_at = max(self.last_activity, s.absolute_due(s.cursor))
                deadline = expected_at + self.cfg.inactivity_timeout_us
                if now >= deadline:
                    out.status = ReplayStatus.TIMED_OUT
                    out.reason = f"no packet from peer for {self.cfg.inactivity_timeout_us} us"
                    return
            got = await self.channel.recv(deadline)
            if got is None:
                continue
            ts, data = got
            try:
                p = PacketRecord.from_ip_bytes(data, ts)
            except ValueError:
                out.unexpected_count += 1
                continue
            self.last_activity = ts
            reason = self.handle(ts, p)
            if reason is not None:
                out.status = ReplayStatus.ABORTED
                out.reason = reason
                return
        if self.missed:
            out.status = ReplayStatus.ABORTED
            out.reason = f"{len(self.missed)} expected packets never arrived"
        else:
            out.status = ReplayStatus.COMPLETED


async def run_connection(
    s: Schedule,
    transport: Channel,
    clock: Any,
    cfg: ReplayConfig = ReplayConfig(),
    outcome: ReplayOutcome | None = None,
) -> ReplayOutcome:
    """Replay ``s`` over ``transport``; returns once the schedule ends, times out or aborts.

    Pass ``outcome`` to observe progress while the engine runs.
    """
    out = outcome if outcome is not None else ReplayOutcome()
    if cfg.duplicate_policy is DuplicatePolicy.DROP_SCHEDULED_DUPLICATES:
        out.dropped_duplicates = s.drop_duplicates()
    out.times_us = [None] * len(s.entries)
    out.status = ReplayStatus.RUNNING
    engine = _Engine(s, transport, clock, cfg, out)
    try:
        await engine.run()
    except TransportClosed as exc:
        out.status = ReplayStatus.ABORTED
        out.reason = f"transport: {exc}"
    return out
