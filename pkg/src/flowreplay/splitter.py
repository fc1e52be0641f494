"""Split a capture into per-connection traces and plan their distribution.

The pipeline is extract -> filter -> assign ports -> compute offsets ->
partition; :func:`split_trace` runs all of it.
"""

from __future__ import annotations

import logging
import os
import re
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .checksum import fix_checksums
from .trace import (
    LINKTYPE_ETHERNET,
    FlowKey,
    PacketRecord,
    TcpFlags,
    Trace,
    flow_key,
    parse_pcap,
    write_pcap,
)

logger = logging.getLogger(__name__)

DEFAULT_BASE_PORT = 20000
MANIFEST_NAME = "manifest.txt"


class SplitError(ValueError):
    pass


class MappingError(SplitError):
    def __init__(self, missing: Iterable[str]) -> None:
        self.missing = sorted(set(missing), key=_ip_sort_key)
        super().__init__("unmapped IP(s): " + ", ".join(self.missing))


class CapacityError(SplitError):
    pass


class NameFormatError(SplitError):
    """Raised by :func:`decode_name` on a non-conforming filename."""


def _ip_sort_key(ip: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in ip.split("."))
    except ValueError:
        return (1 << 30,)


@dataclass(frozen=True)
class ConnectionTrace:
    stream_index: int
    packets: tuple[PacketRecord, ...]
    initiator_ip: str
    responder_ip: str
    replay_port: int = 0
    offset_us: int = 0
    source_name: str = "capture"
    link_type: int = LINKTYPE_ETHERNET

    def __post_init__(self) -> None:
        if not isinstance(self.packets, tuple):
            object.__setattr__(self, "packets", tuple(self.packets))

    def __len__(self) -> int:
        return len(self.packets)

    @property
    def first_ts(self) -> int:
        return self.packets[0].ts_us

    @property
    def name(self) -> str:
        return encode_name(self)

    def to_trace(self) -> Trace:
        return Trace(self.packets, "us", self.link_type)


def validate_connection(c: ConnectionTrace) -> list[str]:
    """Return the list of violated connection invariants (empty if valid)."""
    problems = []
    if len(c.packets) < 3:
        problems.append(f"only {len(c.packets)} packets")
    if not c.packets:
        return problems
    keys = {flow_key(p) for p in c.packets}
    if len(keys) != 1:
        problems.append(f"{len(keys)} distinct flow keys")
    first = c.packets[0]
    if TcpFlags.SYN not in first.flags or TcpFlags.ACK in first.flags:
        problems.append("first packet is not a bare SYN")
    if first.src_ip != c.initiator_ip:
        problems.append("first packet not sent by initiator")
    if c.offset_us < 0:
        problems.append("negative offset")
    if c.replay_port:
        bad = sum(1 for p in c.packets if p.src_port != c.replay_port or p.dst_port != c.replay_port)
        if bad:
            problems.append(f"{bad} packets not on replay port {c.replay_port}")
    return problems


def _is_bare_syn(p: PacketRecord) -> bool:
    return TcpFlags.SYN in p.flags and TcpFlags.ACK not in p.flags


def extract_flows(trace: Trace, source_name: str = "capture") -> list[ConnectionTrace]:
    """Group packets into TCP streams, in order of first appearance.

    A bare SYN on a 4-tuple that already carries a stream starts a new stream,
    unless it is a retransmission of that stream's opening SYN.
    """
    streams: list[list[PacketRecord]] = []
    current: dict[FlowKey, int] = {}
    for p in trace.packets:
        key = flow_key(p)
        idx = current.get(key)
        if idx is not None and _is_bare_syn(p):
            pkts = streams[idx]
            opener = pkts[0]
            retransmitted_syn = (
                _is_bare_syn(opener)
                and opener.src_ip == p.src_ip
                and opener.src_port == p.src_port
                and opener.seq == p.seq
                and all(_is_bare_syn(q) for q in pkts)
            )
            if not retransmitted_syn:
                idx = None
        if idx is None:
            idx = len(streams)
            streams.append([])
            current[key] = idx
        streams[idx].append(p)

    flows = []
    for i, pkts in enumerate(streams):
        opener = next((q for q in pkts if _is_bare_syn(q)), pkts[0])
        flows.append(
            ConnectionTrace(
                stream_index=i,
                packets=tuple(pkts),
                initiator_ip=opener.src_ip,
                responder_ip=opener.dst_ip,
                source_name=source_name,
                link_type=trace.link_type,
            )
        )
    return flows


def filter_handshakes(flows: Sequence[ConnectionTrace]) -> list[ConnectionTrace]:
    """Keep flows with at least three packets that open with a bare SYN."""
    kept = [c for c in flows if len(c.packets) >= 3 and _is_bare_syn(c.packets[0])]
    if len(kept) != len(flows):
        logger.info("dropped %d of %d flows without a handshake", len(flows) - len(kept), len(flows))
    return kept


def assign_ports(flows: Sequence[ConnectionTrace], base_port: int = DEFAULT_BASE_PORT) -> list[ConnectionTrace]:
    if not 0 < base_port <= 65535:
        raise CapacityError(f"base port {base_port} out of range")
    if base_port + len(flows) > 65535:
        raise CapacityError(f"{len(flows)} connections do not fit above port {base_port}")
    out = []
    for i, c in enumerate(flows):
        port = base_port + i
        pkts = tuple(fix_checksums(replace(p, src_port=port, dst_port=port)) for p in c.packets)
        out.append(replace(c, packets=pkts, replay_port=port))
    return out


def compute_offsets(flows: Sequence[ConnectionTrace]) -> list[ConnectionTrace]:
    if not flows:
        return []
    start = min(c.first_ts for c in flows)
    return [replace(c, offset_us=c.first_ts - start) for c in flows]


# -- host mapping and node plans ------------------------------------------


class HostMapping(Mapping[str, str]):
    """Original IP address -> replay node id."""

    def __init__(self, pairs: Mapping[str, str] | Iterable[tuple[str, str]] = ()) -> None:
        self._map = dict(pairs)

    def __getitem__(self, ip: str) -> str:
        return self._map[ip]

    def __iter__(self):
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def __repr__(self) -> str:
        return f"HostMapping({self._map!r})"

    @property
    def nodes(self) -> list[str]:
        return sorted(set(self._map.values()))

    @classmethod
    def parse(cls, text: str) -> HostMapping:
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise SplitError(f"mapping line {lineno}: expected '<ip> <node-id>'")
            pairs.append((parts[0], parts[1]))
        return cls(pairs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> HostMapping:
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return "".join(f"{ip} {node}\n" for ip, node in self._map.items())


@dataclass
class NodePlan:
    """Per-node connection assignment.

    ``nodes`` maps node id to the connections that node takes part in;
    ``endpoints`` maps connection name to (initiator node, responder node).
    """

    nodes: dict[str, list[ConnectionTrace]] = field(default_factory=dict)
    endpoints: dict[str, tuple[str, str]] = field(default_factory=dict)
    connections: list[ConnectionTrace] = field(default_factory=list)

    def roles(self, node: str) -> list[tuple[ConnectionTrace, bool]]:
        """(connection, initiator?) pairs for ``node``; loopback connections yield both roles."""
        out = []
        for c in self.nodes.get(node, []):
            init_node, resp_node = self.endpoints[c.name]
            if init_node == node:
                out.append((c, True))
            if resp_node == node:
                out.append((c, False))
        return out

    def initiator_count(self, node: str) -> int:
        return sum(1 for c in self.connections if self.endpoints[c.name][0] == node)

    def manifest_text(self) -> str:
        return "".join(
            f"{c.name} {self.endpoints[c.name][0]} {self.endpoints[c.name][1]}\n" for c in self.connections
        )


def partition(flows: Sequence[ConnectionTrace], mapping: Mapping[str, str]) -> NodePlan:
    missing = [ip for c in flows for ip in (c.initiator_ip, c.responder_ip) if ip not in mapping]
    if missing:
        raise MappingError(missing)
    plan = NodePlan(nodes={n: [] for n in sorted(set(mapping.values()))})
    for c in flows:
        a, b = mapping[c.initiator_ip], mapping[c.responder_ip]
        plan.endpoints[c.name] = (a, b)
        plan.connections.append(c)
        plan.nodes[a].append(c)
        if b != a:
            plan.nodes[b].append(c)
    return plan


# -- file naming --------------------------------------------------------------

_NAME_RE = re.compile(
    r"^(?P<init>\d{1,3}(?:\.\d{1,3}){3})_(?P<resp>\d{1,3}(?:\.\d{1,3}){3})"
    r"_s(?P<stream>\d+)_(?P<source>.+)_p(?P<port>\d+)_o(?P<offset>\d+)\.pcap$"
)


@dataclass(frozen=True)
class NameInfo:
    initiator_ip: str
    responder_ip: str
    stream_index: int
    source_name: str
    replay_port: int
    offset_us: int


def encode_name(c: ConnectionTrace | NameInfo) -> str:
    return (
        f"{c.initiator_ip}_{c.responder_ip}_s{c.stream_index}_{c.source_name}"
        f"_p{c.replay_port}_o{c.offset_us}.pcap"
    )


def decode_name(name: str) -> NameInfo:
    m = _NAME_RE.match(os.path.basename(name))
    if m is None:
        raise NameFormatError(f"not a connection file name: {name!r}")
    port = int(m["port"])
    if port > 65535:
        raise NameFormatError(f"port out of range in {name!r}")
    return NameInfo(
        initiator_ip=m["init"],
        responder_ip=m["resp"],
        stream_index=int(m["stream"]),
        source_name=m["source"],
        replay_port=port,
        offset_us=int(m["offset"]),
    )


def load_connection(name: str, data: bytes) -> ConnectionTrace:
    """Rebuild a :class:`ConnectionTrace` from a connection file's name and bytes."""
    info = decode_name(name)
    trace = parse_pcap(data)
    return ConnectionTrace(
        stream_index=info.stream_index,
        packets=trace.packets,
        initiator_ip=info.initiator_ip,
        responder_ip=info.responder_ip,
        replay_port=info.replay_port,
        offset_us=info.offset_us,
        source_name=info.source_name,
        link_type=trace.link_type,
    )


# -- whole pipeline -------------------------------------------------------------


@dataclass
class SplitResult:
    plan: NodePlan
    extracted: int
    dropped: int
    skipped_records: int

    @property
    def kept(self) -> int:
        return len(self.plan.connections)


def split_trace(
    trace: Trace,
    mapping: Mapping[str, str],
    base_port: int = DEFAULT_BASE_PORT,
    source_name: str = "capture",
) -> SplitResult:
    flows = extract_flows(trace, source_name)
    kept = filter_handshakes(flows)
    kept = compute_offsets(assign_ports(kept, base_port))
    plan = partition(kept, mapping)
    return SplitResult(plan, len(flows), len(flows) - len(kept), trace.skipped)


def write_plan(plan: NodePlan, out_dir: str | os.PathLike) -> Path:
    """One directory per node holding its connection files, plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for node, conns in plan.nodes.items():
        node_dir = out / node
        node_dir.mkdir(exist_ok=True)
        for c in conns:
            write_pcap(c.to_trace(), node_dir / c.name)
    (out / MANIFEST_NAME).write_text(plan.manifest_text())
    return out


def parse_manifest(text: str) -> "OrderedDict[str, tuple[str, str]]":
    entries: OrderedDict[str, tuple[str, str]] = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise SplitError(f"manifest line {lineno}: expected '<name> <initiator> <responder>'")
        entries[parts[0]] = (parts[1], parts[2])
    return entries


def read_plan(split_dir: str | os.PathLike) -> NodePlan:
    """Inverse of :func:`write_plan`."""
    root = Path(split_dir)
    entries = parse_manifest((root / MANIFEST_NAME).read_text())
    plan = NodePlan()
    for name, (init_node, resp_node) in entries.items():
        c = load_connection(name, (root / init_node / name).read_bytes())
        plan.connections.append(c)
        plan.endpoints[name] = (init_node, resp_node)
        for node in dict.fromkeys((init_node, resp_node)):
            plan.nodes.setdefault(node, []).append(c)
    for d in sorted(p.name for p in root.iterdir() if p.is_dir()):
        plan.nodes.setdefault(d, [])
    return plan
