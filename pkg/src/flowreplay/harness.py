"""Packet transports for replay engines, plus capture taps.

An :class:`Endpoint` belongs to one replay node and is shared by all of that
node's engines. Engines open a :class:`Channel` per connection; incoming
packets are demultiplexed on (destination port, destination IP) parsed from
the inner IPv4/TCP packet.

Two endpoint kinds exist: :class:`SimEndpoint` on a :class:`SimNetwork`
(virtual time, delay/jitter/loss/duplication) and :class:`DatagramEndpoint`,
which carries each packet inside one UDP datagram for real multi-host runs.
"""

from __future__ import annotations

import asyncio
import collections
import logging
import random
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable

from .clock import RealClock
from .trace import LINKTYPE_ETHERNET, SYNTHETIC_ETHERNET, PacketRecord, Trace

logger = logging.getLogger(__name__)

DEFAULT_MTU = 65507
_FRAME_HEADER = struct.Struct("!I")


class TransportError(OSError):
    pass


class TransportClosed(TransportError):
    pass


def packet_route(data: bytes) -> tuple[int, str] | None:
    """(dst_port, dst_ip) of an IPv4/TCP packet, or None if unparseable."""
    if len(data) < 20 or data[0] >> 4 != 4:
        return None
    ihl = (data[0] & 0x0F) * 4
    if len(data) < ihl + 4:
        return None
    dst_port = struct.unpack_from("!H", data, ihl + 2)[0]
    return dst_port, socket.inet_ntoa(data[16:20])


# -- capture ---------------------------------------------------------------


@dataclass
class CaptureTap:
    """Records packets crossing an endpoint for the channels it watches.

    By default nothing is watched; agents call :meth:`watch` for every
    connection their node initiates.
    """

    predicate: Callable[[int, str], bool] | None = None
    watched: set[tuple[int, str]] = field(default_factory=set)
    records: list[tuple[int, bytes]] = field(default_factory=list)

    def watch(self, port: int, local_ip: str) -> None:
        self.watched.add((port, local_ip))

    def wants(self, port: int, local_ip: str) -> bool:
        if self.predicate is not None:
            return self.predicate(port, local_ip)
        return (port, local_ip) in self.watched

    def record(self, ts_us: int, data: bytes) -> None:
        self.records.append((ts_us, bytes(data)))


def capture(tap: CaptureTap) -> Trace:
    """Everything ``tap`` saw, as an Ethernet trace in observation order."""
    packets = []
    for ts, data in tap.records:
        try:
            packets.append(PacketRecord.from_ip_bytes(data, ts, SYNTHETIC_ETHERNET))
        except ValueError:
            logger.warning("tap recorded an unparseable packet at %d", ts)
    return Trace(tuple(packets), "us", LINKTYPE_ETHERNET)


# -- endpoints ---------------------------------------------------------------


class Channel:
    """One engine's view of an endpoint: a port/IP pair with a receive queue."""

    def __init__(self, endpoint: Endpoint, port: int, local_ip: str, peer: Hashable) -> None:
        self.endpoint = endpoint
        self.port = port
        self.local_ip = local_ip
        self.peer = peer
        self.closed = False
        self._queue: collections.deque[tuple[int, bytes]] = collections.deque()
        self._waiter: asyncio.Future | None = None

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportClosed(f"channel {self.port}/{self.local_ip} is closed")
        self.endpoint.transmit(self, data)

    def _deliver(self, ts_us: int, data: bytes) -> None:
        self._queue.append((ts_us, data))
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)

    async def recv(self, deadline_us: int | None = None) -> tuple[int, bytes] | None:
        """Next (receive time, packet bytes), or None once ``deadline_us`` passes."""
        if self._queue:
            return self._queue.popleft()
        if self.closed:
            raise TransportClosed(f"channel {self.port}/{self.local_ip} is closed")
        loop = asyncio.get_running_loop()
        waiter = loop.create_future()
        self._waiter = waiter
        timer = None
        if deadline_us is not None:
            timer = loop.call_at(
                self.endpoint.clock.loop_time(deadline_us),
                lambda: waiter.done() or waiter.set_result(None),
            )
        try:
            await waiter
        finally:
            self._waiter = None
            if timer is not None:
                timer.cancel()
        if self._queue:
            return self._queue.popleft()
        if self.closed:
            raise TransportClosed(f"channel {self.port}/{self.local_ip} is closed")
        return None

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.endpoint._channels.pop((self.port, self.local_ip), None)
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_result(None)


class Endpoint:
    def __init__(self, clock: Any, tap: CaptureTap | None = None) -> None:
        self.clock = clock
        self.tap = tap
        self._channels: dict[tuple[int, str], Channel] = {}
        self.closed = False
        self.undeliverable = 0

    def open(self, port: int, local_ip: str, peer: Hashable) -> Channel:
        key = (port, local_ip)
        if self.closed:
            raise TransportClosed("endpoint is closed")
        if key in self._channels:
            raise TransportError(f"port {port} already open for {local_ip}")
        ch = Channel(self, port, local_ip, peer)
        self._channels[key] = ch
        return ch

    def transmit(self, channel: Channel, data: bytes) -> None:
        if self.closed:
            raise TransportClosed("endpoint is closed")
        if self.tap is not None and self.tap.wants(channel.port, channel.local_ip):
            self.tap.record(self.clock.now_us(), data)
        self._send(channel.peer, data)

    def _send(self, peer: Hashable, data: bytes) -> None:
        raise NotImplementedError

    def deliver(self, data: bytes) -> None:
        """Hand an incoming packet to the channel it is addressed to."""
        route = packet_route(data)
        if route is None:
            self.undeliverable += 1
            return
        now = self.clock.now_us()
        if self.tap is not None and self.tap.wants(*route):
            self.tap.record(now, data)
        ch = self._channels.get(route)
        if ch is None:
            self.undeliverable += 1
            return
        ch._deliver(now, data)

    def close(self) -> None:
        self.closed = True
        for ch in list(self._channels.values()):
            ch.close()


# -- simulated network ---------------------------------------------------------


@dataclass(frozen=True)
class LinkParams:
    one_way_delay_us: int = 0
    jitter_us: int = 0
    loss_prob: float = 0.0
    duplicate_prob: float = 0.0
    reorder: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.one_way_delay_us < 0 or self.jitter_us < 0:
            raise ValueError("delay and jitter must be >= 0")
        for name in ("loss_prob", "duplicate_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")


class _Direction:
    """State of one direction of a simulated link."""

    def __init__(self, params: LinkParams, label: str) -> None:
        self.params = params
        self.rng = random.Random(f"{params.seed}:{label}")
        self.last_delivery = 0
        self.in_flight: collections.deque[tuple[int, bytes]] = collections.deque()
        self.sent = self.delivered = self.lost = self.duplicated = 0

    def delivery_times(self, now: int) -> list[int]:
        p = self.params
        self.sent += 1
        if p.loss_prob and self.rng.random() < p.loss_prob:
            self.lost += 1
            return []
        copies = 1
        if p.duplicate_prob and self.rng.random() < p.duplicate_prob:
            copies = 2
            self.duplicated += 1
        times = []
        for _ in range(copies):
            delay = p.one_way_delay_us
            if p.jitter_us:
                delay = max(0, delay + self.rng.randint(-p.jitter_us, p.jitter_us))
            at = now + delay
            if not p.reorder:
                at = max(at, self.last_delivery)
                self.last_delivery = at
            times.append(at)
        return times


class SimNetwork:
    """Nodes joined pairwise by simulated links; runs on a virtual-time loop."""

    def __init__(self, clock: Any, params: LinkParams | None = None) -> None:
        self.clock = clock
        self.params = params or LinkParams()
        self.links: dict[tuple[str, str], LinkParams] = {}
        self._endpoints: dict[str, SimEndpoint] = {}
        self._directions: dict[tuple[str, str], _Direction] = {}

    def set_link(self, a: str, b: str, params: LinkParams) -> None:
        self.links[(a, b)] = params
        self.links[(b, a)] = params

    def endpoint(self, node: str, tap: CaptureTap | None = None) -> SimEndpoint:
        if node in self._endpoints:
            raise TransportError(f"node {node!r} already attached")
        ep = SimEndpoint(self, node, tap)
        self._endpoints[node] = ep
        return ep

    def direction(self, src: str, dst: str) -> _Direction:
        key = (src, dst)
        d = self._directions.get(key)
        if d is None:
            d = _Direction(self.links.get(key, self.params), f"{src}->{dst}")
            self._directions[key] = d
        return d

    def send(self, src: str, dst: str, data: bytes) -> None:
        target = self._endpoints.get(dst)
        if target is None:
            raise TransportError(f"no node {dst!r} on the network")
        d = self.direction(src, dst)
        now = self.clock.now_us()
        loop = asyncio.get_running_loop()
        for at in d.delivery_times(now):
            if d.params.reorder:
                loop.call_at(self.clock.loop_time(at), self._deliver_one, target, d, data)
            else:
                d.in_flight.append((at, data))
                loop.call_at(self.clock.loop_time(at), self._deliver_head, target, d)

    def _deliver_head(self, target: SimEndpoint, d: _Direction) -> None:
        _at, data = d.in_flight.popleft()
        self._deliver_one(target, d, data)

    def _deliver_one(self, target: SimEndpoint, d: _Direction, data: bytes) -> None:
        d.delivered += 1
        if not target.closed:
            target.deliver(data)


class SimEndpoint(Endpoint):
    def __init__(self, network: SimNetwork, node: str, tap: CaptureTap | None = None) -> None:
        super().__init__(network.clock, tap)
        self.network = network
        self.node = node

    def _send(self, peer: Hashable, data: bytes) -> None:
        self.network.send(self.node, str(peer), data)


def simulated_link(
    params: LinkParams, clock: Any, taps: tuple[CaptureTap | None, CaptureTap | None] = (None, None)
) -> tuple[SimEndpoint, SimEndpoint]:
    """Two endpoints, ``"A"`` and ``"B"``, joined by one simulated link."""
    net = SimNetwork(clock, params)
    return net.endpoint("A", taps[0]), net.endpoint("B", taps[1])


# -- datagram carriage -----------------------------------------------------------


def frame_datagram(packet: bytes) -> bytes:
    return _FRAME_HEADER.pack(len(packet)) + packet


def unframe_datagram(datagram: bytes) -> bytes | None:
    """Inner packet, or None if the length prefix disagrees with the datagram size."""
    if len(datagram) < 4:
        return None
    (n,) = _FRAME_HEADER.unpack_from(datagram)
    if n != len(datagram) - 4:
        return None
    return datagram[4:]


class DatagramEndpoint(Endpoint, asyncio.DatagramProtocol):
    """Carries one crafted TCP/IP packet per UDP datagram.

    ``peer`` on :meth:`open` is a (host, port) address; ``default_peer`` is
    used when a channel is opened with ``peer=None``.
    """

    def __init__(self, clock: Any, tap: CaptureTap | None = None, mtu: int = DEFAULT_MTU,
                 default_peer: tuple[str, int] | None = None) -> None:
        Endpoint.__init__(self, clock, tap)
        self.mtu = mtu
        self.default_peer = default_peer
        self.bad_frames = 0
        self.transport: asyncio.DatagramTransport | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.transport.get_extra_info("sockname")[:2]

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        inner = unframe_datagram(data)
        if inner is None:
            self.bad_frames += 1
            return
        self.deliver(inner)

    def error_received(self, exc: Exception) -> None:
        logger.warning("datagram endpoint error: %s", exc)

    def connection_lost(self, exc) -> None:
        self.closed = True

    def _send(self, peer: Hashable, data: bytes) -> None:
        frame = frame_datagram(data)
        if len(frame) > self.mtu:
            raise TransportError(f"packet of {len(data)} bytes exceeds MTU {self.mtu}")
        if self.transport is None or self.transport.is_closing():
            raise TransportClosed("datagram endpoint is closed")
        self.transport.sendto(frame, peer if peer is not None else self.default_peer)

    def close(self) -> None:
        super().close()
        if self.transport is not None:
            self.transport.close()


async def datagram_transport(
    local: tuple[str, int],
    peer: tuple[str, int] | None = None,
    clock: Any = None,
    tap: CaptureTap | None = None,
    mtu: int = DEFAULT_MTU,
) -> DatagramEndpoint:
    """Bind a UDP socket at ``local``; raises :class:`TransportError` on bind failure."""
    loop = asyncio.get_running_loop()
    ep = DatagramEndpoint(clock or RealClock(), tap, mtu, peer)
    try:
        await loop.create_datagram_endpoint(lambda: ep, local_addr=local)
    except OSError as exc:
        raise TransportError(f"cannot bind {local[0]}:{local[1]}: {exc}") from exc
    return ep
