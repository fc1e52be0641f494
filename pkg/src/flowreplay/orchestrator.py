"""Controller/agent coordination of a distributed replay run.

The controller splits the input capture, uploads each node's connection
files, broadcasts one start epoch, polls until every engine has finished and
fetches each node's capture. Agents run one replay engine per connection role
starting at ``sync_epoch_us + offset_us`` and record the connections their
node initiates.

:func:`simulate` runs the same controller and agents in one process over a
:class:`~flowreplay.harness.SimNetwork` on virtual time.
"""

from __future__ import annotations

import asyncio
import dataclasses
import datetime as _dt
import ipaddress
import json
import logging
import os
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Awaitable, Callable, Mapping

from . import protocol as proto
from .clock import RealClock, VirtualClock, run_virtual, sleep_until
from .harness import (
    CaptureTap,
    Channel,
    DatagramEndpoint,
    Endpoint,
    LinkParams,
    SimEndpoint,
    SimNetwork,
    TransportError,
    capture,
    datagram_transport,
)
from .replay import DuplicatePolicy, ReplayConfig, ReplayOutcome, ReplayStatus, run_connection
from .schedule import build_schedule
from .splitter import (
    DEFAULT_BASE_PORT,
    ConnectionTrace,
    HostMapping,
    MappingError,
    NameFormatError,
    SplitResult,
    load_connection,
    parse_manifest,
    split_trace,
    write_plan,
)
from .trace import PcapError, pcap_bytes, read_pcap

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run.json"
SPLIT_DIR = "split"
CAPTURE_DIR = "captures"


class OrchestrationError(RuntimeError):
    pass


class AgentUnreachable(OrchestrationError):
    pass


# -- agent ------------------------------------------------------------------


@dataclass
class PeerInfo:
    node_id: str
    replay_ip: str
    address: tuple[str, int] | None = None


def format_peers(peers: Mapping[str, PeerInfo]) -> str:
    lines = []
    for p in peers.values():
        addr = f" {p.address[0]}:{p.address[1]}" if p.address else ""
        lines.append(f"{p.node_id} {p.replay_ip}{addr}\n")
    return "".join(lines)


def parse_peers(text: str) -> dict[str, PeerInfo]:
    peers = {}
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        addr = parse_address(parts[2]) if len(parts) > 2 else None
        peers[parts[0]] = PeerInfo(parts[0], parts[1], addr)
    return peers


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _loopback_alias(ip: str) -> str:
    addr = ipaddress.IPv4Address(ip)
    return str(addr + 1) if int(addr) < 0xFFFFFFFE else str(addr - 1)


@dataclass
class _Role:
    conn: ConnectionTrace
    initiator: bool
    outcome: ReplayOutcome = field(default_factory=ReplayOutcome)


class Agent:
    """Replay node service. One instance serves one run at a time."""

    def __init__(self, endpoint: Endpoint, clock: Any) -> None:
        self.endpoint = endpoint
        self.clock = clock
        self._reset()

    def _reset(self) -> None:
        self.node_id = ""
        self.phase = "idle"
        self.roles: list[_Role] = []
        self.rejected: list[proto.ConnectionStatus] = []
        self.warnings: list[str] = []
        self.peers: dict[str, PeerInfo] = {}
        self.manifest: dict[str, tuple[str, str]] = {}
        self.cfg = ReplayConfig()
        self.seed = "0"
        self.tap = CaptureTap()
        self.endpoint.tap = self.tap
        self._capture: bytes | None = None
        self._supervisor: asyncio.Task | None = None

    # message handling

    async def handle(self, msg: proto.Message) -> proto.Message:
        if isinstance(msg, proto.Upload):
            return self._upload(msg)
        if isinstance(msg, proto.Start):
            return self._start(msg)
        if isinstance(msg, proto.StatusRequest):
            return self.status()
        if isinstance(msg, proto.FetchRequest):
            if self.phase != "finished":
                return proto.Error(f"replay not finished (phase {self.phase})")
            return proto.Capture(f"{self.node_id}.pcap", self._capture or b"")
        return proto.Error(f"unexpected message {type(msg).__name__}")

    async def serve(self, reader, writer) -> None:
        """Answer one control connection until the peer closes it."""
        try:
            while True:
                try:
                    msg = await proto.read_message(reader)
                except proto.ProtocolError as exc:
                    await proto.write_message(writer, proto.Error(str(exc)))
                    break
                if msg is None:
                    break
                await proto.write_message(writer, await self.handle(msg))
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    def _upload(self, msg: proto.Upload) -> proto.Message:
        if self.phase == "running":
            return proto.Error("cannot upload while a replay is running")
        self._reset()
        self.node_id = msg.node_id
        self.peers = parse_peers(msg.peers)
        opts = dict(line.split("=", 1) for line in msg.options.splitlines() if "=" in line)
        try:
            self.cfg = ReplayConfig(
                inactivity_timeout_us=int(opts.get("inactivity_timeout_us", 10_000_000)),
                duplicate_policy=DuplicatePolicy(opts.get("duplicate_policy", "strict")),
            )
        except ValueError as exc:
            return proto.Error(f"bad options: {exc}")
        self.seed = opts.get("seed", "0")
        if self.node_id not in self.peers:
            return proto.Error(f"peer table has no entry for this node ({self.node_id})")
        try:
            manifest = parse_manifest(msg.manifest)
        except ValueError as exc:
            return proto.Error(f"bad manifest: {exc}")
        self.manifest = dict(manifest)
        for name, data in msg.files.items():
            reason = ""
            try:
                conn = load_connection(name, data)
            except NameFormatError as exc:
                reason = str(exc)
            except PcapError as exc:
                reason = f"unreadable capture: {exc}"
            else:
                if name not in manifest:
                    reason = "not listed in manifest"
            if reason:
                self.rejected.append(proto.ConnectionStatus(name, False, "rejected", reason=reason))
                continue
            init_node, resp_node = manifest[name]
            if self.node_id not in (init_node, resp_node):
                self.rejected.append(proto.ConnectionStatus(name, False, "rejected", reason="not an endpoint"))
                continue
            missing = [n for n in (init_node, resp_node) if n not in self.peers]
            if missing:
                self.rejected.append(proto.ConnectionStatus(
                    name, False, "rejected", reason=f"unknown peer node(s) {', '.join(missing)}"))
                continue
            if init_node == self.node_id:
                self.roles.append(_Role(conn, True))
            if resp_node == self.node_id:
                self.roles.append(_Role(conn, False))
        listed = {n for n, ends in manifest.items() if self.node_id in ends}
        for name in sorted(listed - set(msg.files)):
            self.warnings.append(f"manifest lists {name} but it was not uploaded")
        self.phase = "uploaded"
        return self.status()

    def _route(self, node: str):
        if isinstance(self.endpoint, SimEndpoint):
            return node
        return self.peers[node].address

    def _start(self, msg: proto.Start) -> proto.Message:
        if self.phase == "idle":
            return proto.Error("start before upload")
        if self.phase in ("running", "finished"):
            self.warnings.append("duplicate start ignored")
            return self.status()
        my_ip = self.peers[self.node_id].replay_ip
        tasks = []
        for role in self.roles:
            c = role.conn
            init_node, resp_node = self.manifest[c.name]
            peer = resp_node if role.initiator else init_node
            local_ip, remote_ip = my_ip, self.peers[peer].replay_ip
            if init_node == resp_node:
                alias = _loopback_alias(my_ip)
                local_ip, remote_ip = (my_ip, alias) if role.initiator else (alias, my_ip)
            try:
                channel = self.endpoint.open(c.replay_port, local_ip, self._route(peer))
            except TransportError as exc:
                role.outcome.status = ReplayStatus.ABORTED
                role.outcome.reason = f"transport: {exc}"
                continue
            if role.initiator:
                self.tap.watch(c.replay_port, local_ip)
            schedule = build_schedule(
                c, role.initiator, local_ip, remote_ip,
                msg.sync_epoch_us + c.offset_us,
                rng_seed=f"{self.seed}:{c.name}:{int(role.initiator)}",
            )
            tasks.append(asyncio.ensure_future(self._run_engine(schedule, channel, role)))
        self.phase = "running"
        self._supervisor = asyncio.ensure_future(self._supervise(tasks))
        return self.status()

    async def _run_engine(self, schedule, channel: Channel, role: _Role) -> None:
        try:
            await run_connection(schedule, channel, self.clock, self.cfg, role.outcome)
        finally:
            channel.close()

    async def _supervise(self, tasks: list[asyncio.Task]) -> None:
        results = await asyncio.gather(*tasks, return_exceptions=True)
        for r in results:
            if isinstance(r, BaseException):
                logger.error("engine crashed: %r", r)
                self.warnings.append(f"engine crashed: {r!r}")
        self._capture = pcap_bytes(capture(self.tap))
        self.phase = "finished"

    def status(self) -> proto.Status:
        conns = list(self.rejected)
        for role in self.roles:
            o = role.outcome
            conns.append(proto.ConnectionStatus(
                name=role.conn.name,
                initiator=role.initiator,
                state=o.status.value,
                sent=o.sent_count,
                received=o.received_count,
                unexpected=o.unexpected_count,
                duplicate=o.duplicate_count,
                missed=o.missed_count,
                late=o.late_sends,
                first_send_us=o.first_send_us,
                reason=o.reason,
            ))
        return proto.Status(self.node_id, self.phase, self.clock.now_us(), conns, list(self.warnings))


async def run_agent(listen: tuple[str, int], data: tuple[str, int] | None = None,
                    ready: Callable[[Agent, asyncio.AbstractServer], None] | None = None) -> None:
    """Serve the control protocol on ``listen`` and carry packets over UDP on ``data``.

    ``data`` defaults to the control port plus one. Never returns normally;
    bind failures surface as :class:`TransportError` / ``OSError``.
    """
    data = data or (listen[0], listen[1] + 1)
    clock = RealClock()
    endpoint = await datagram_transport(data, clock=clock)
    agent = Agent(endpoint, clock)
    try:
        server = await asyncio.start_server(agent.serve, listen[0], listen[1])
    except OSError:
        endpoint.close()
        raise
    logger.info("agent listening on %s:%d, packets on %s:%d", *listen, *endpoint.address)
    if ready is not None:
        ready(agent, server)
    try:
        async with server:
            await server.serve_forever()
    finally:
        endpoint.close()


# -- controller ------------------------------------------------------------------


@dataclass
class AgentInfo:
    """How the controller reaches a node: control address plus packet address."""

    node_id: str
    control: tuple[str, int] | None = None
    data: tuple[str, int] | None = None
    replay_ip: str | None = None

    def peer(self) -> PeerInfo:
        ip = self.replay_ip
        if ip is None:
            host = (self.data or self.control or ("127.0.0.1", 0))[0]
            ip = socket.gethostbyname(host)
        return PeerInfo(self.node_id, ip, self.data)


def load_agents(path: str | os.PathLike) -> dict[str, AgentInfo]:
    """Agents file: ``<node-id> <host:port> [<data host:port>]`` per line, ``#`` comments."""
    agents = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"agents line {lineno}: expected '<node-id> <host:port> [<data host:port>]'")
        control = parse_address(parts[1])
        data = parse_address(parts[2]) if len(parts) == 3 else (control[0], control[1] + 1)
        agents[parts[0]] = AgentInfo(parts[0], control, data)
    return agents


@dataclass
class RunConfig:
    base_port: int = DEFAULT_BASE_PORT
    lead_time_us: int = 3_000_000
    seed: int = 0
    duplicate_policy: DuplicatePolicy = DuplicatePolicy.STRICT
    inactivity_timeout_us: int = 10_000_000
    poll_interval_us: int = 200_000
    link: LinkParams | None = None

    def options_text(self) -> str:
        return (
            f"duplicate_policy={self.duplicate_policy.value}\n"
            f"inactivity_timeout_us={self.inactivity_timeout_us}\n"
            f"seed={self.seed}\n"
        )


@dataclass
class RunManifest:
    """Everything needed to reproduce (simulate mode) or audit a run."""

    mode: str
    input: str
    source_name: str
    mapping: dict[str, str]
    agents: dict[str, dict]
    base_port: int
    seed: int
    lead_time_us: int
    duplicate_policy: str
    inactivity_timeout_us: int
    link: dict | None = None
    sync_epoch_us: int | None = None
    status: str = "pending"
    error: str = ""
    kept: int = 0
    dropped: int = 0
    nodes: dict[str, dict] = field(default_factory=dict)

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))

    def run_config(self) -> RunConfig:
        return RunConfig(
            base_port=self.base_port,
            lead_time_us=self.lead_time_us,
            seed=self.seed,
            duplicate_policy=DuplicatePolicy(self.duplicate_policy),
            inactivity_timeout_us=self.inactivity_timeout_us,
            link=LinkParams(**self.link) if self.link else None,
        )


@dataclass
class RunResult:
    run_dir: Path
    manifest: RunManifest
    statuses: dict[str, proto.Status]
    split: SplitResult

    @property
    def connection_states(self) -> list[proto.ConnectionStatus]:
        return [c for st in self.statuses.values() for c in st.connections]

    @property
    def ok(self) -> bool:
        return self.manifest.status == "completed" and all(
            c.state == "completed" for c in self.connection_states
        )

    def failures(self) -> list[str]:
        return [
            f"{node}: {c.name} ({'initiator' if c.initiator else 'responder'}) {c.state}"
            + (f" - {c.reason}" if c.reason else "")
            for node, st in self.statuses.items()
            for c in st.connections
            if c.state != "completed"
        ]


def make_run_dir(base: str | os.PathLike, now: _dt.datetime | None = None) -> Path:
    """Create ``<base>/run-YYYYmmdd-HHMMSS[-N]`` and return it."""
    stamp = (now or _dt.datetime.now()).strftime("run-%Y%m%d-%H%M%S")
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    for n in range(1000):
        candidate = base / (stamp if n == 0 else f"{stamp}-{n}")
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            continue
    raise OrchestrationError(f"cannot create a run directory under {base}")


Connector = Callable[[str], Awaitable[tuple[Any, Any]]]


class _Session:
    def __init__(self, node: str, reader, writer) -> None:
        self.node = node
        self.reader = reader
        self.writer = writer
        self.lock = asyncio.Lock()

    async def call(self, msg: proto.Message) -> proto.Message:
        async with self.lock:
            await proto.write_message(self.writer, msg)
            reply = await proto.read_message(self.reader)
        if reply is None:
            raise ConnectionResetError(f"agent {self.node} closed the control channel")
        return reply

    def close(self) -> None:
        self.writer.close()


def _tcp_connector(agents: Mapping[str, AgentInfo]) -> Connector:
    async def connect(node: str):
        info = agents[node]
        if info.control is None:
            raise AgentUnreachable(f"no control address for {node}")
        return await asyncio.open_connection(*info.control)

    return connect


async def run_controller(
    input_pcap: str | os.PathLike,
    mapping: HostMapping,
    agents: Mapping[str, AgentInfo],
    cfg: RunConfig,
    run_dir: str | os.PathLike,
    clock: Any = None,
    connect: Connector | None = None,
    mode: str = "run",
) -> RunResult:
    """Split, upload, start, poll, fetch. Writes everything under ``run_dir``.

    Raises :class:`MappingError` for unmapped IPs and :class:`AgentUnreachable`
    before any Start is sent if a node cannot be reached or rejects its upload.
    """
    clock = clock or RealClock()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    connect = connect or _tcp_connector(agents)

    trace = read_pcap(input_pcap)
    source_name = Path(input_pcap).stem
    split = split_trace(trace, mapping, cfg.base_port, source_name)
    plan = split.plan
    write_plan(plan, run_dir / SPLIT_DIR)

    manifest = RunManifest(
        mode=mode,
        input=str(Path(input_pcap).resolve()),
        source_name=source_name,
        mapping=dict(mapping),
        agents={n: {"control": a.control and f"{a.control[0]}:{a.control[1]}",
                    "data": a.data and f"{a.data[0]}:{a.data[1]}",
                    "replay_ip": a.replay_ip} for n, a in agents.items()},
        base_port=cfg.base_port,
        seed=cfg.seed,
        lead_time_us=cfg.lead_time_us,
        duplicate_policy=cfg.duplicate_policy.value,
        inactivity_timeout_us=cfg.inactivity_timeout_us,
        link=dataclasses.asdict(cfg.link) if cfg.link else None,
        kept=split.kept,
        dropped=split.dropped,
    )
    nodes = list(plan.nodes)
    unknown = [n for n in nodes if n not in agents]
    if unknown:
        manifest.status, manifest.error = "failed", f"no agent address for node(s) {', '.join(unknown)}"
        manifest.dump(run_dir / RUN_MANIFEST)
        raise AgentUnreachable(manifest.error)

    peers = {n: agents[n].peer() for n in nodes}
    if len({p.replay_ip for p in peers.values()}) < len(peers):
        # packets travel inside UDP, so the inner addresses only need to be distinct
        synthetic = sim_agents(nodes)
        peers = {n: dataclasses.replace(p, replay_ip=synthetic[n].replay_ip) for n, p in peers.items()}
    manifest.agents = {n: {**manifest.agents.get(n, {}), "replay_ip": p.replay_ip} for n, p in peers.items()}
    peers_text = format_peers(peers)
    manifest_text = plan.manifest_text()
    statuses: dict[str, proto.Status] = {}
    sessions: dict[str, _Session] = {}

    def fail(msg: str) -> None:
        manifest.status, manifest.error = "failed", msg
        manifest.nodes = {n: _status_dict(st) for n, st in statuses.items()}
        manifest.dump(run_dir / RUN_MANIFEST)

    async def open_session(node: str) -> None:
        try:
            reader, writer = await connect(node)
        except (OSError, AgentUnreachable) as exc:
            raise AgentUnreachable(f"agent {node} unreachable: {exc}") from exc
        sessions[node] = _Session(node, reader, writer)

    async def upload(node: str) -> None:
        files = {c.name: pcap_bytes(c.to_trace()) for c in plan.nodes[node]}
        reply = await sessions[node].call(
            proto.Upload(node, manifest_text, peers_text, cfg.options_text(), files))
        if not isinstance(reply, proto.Status):
            raise AgentUnreachable(f"agent {node} refused upload: {_describe(reply)}")
        statuses[node] = reply

    try:
        try:
            await asyncio.gather(*(open_session(n) for n in nodes))
            await asyncio.gather(*(upload(n) for n in nodes))
        except (AgentUnreachable, OSError, proto.ProtocolError) as exc:
            fail(str(exc))
            if isinstance(exc, AgentUnreachable):
                raise
            raise AgentUnreachable(str(exc)) from exc

        sync = clock.now_us() + cfg.lead_time_us
        manifest.sync_epoch_us = sync
        start = proto.Start(sync, cfg.lead_time_us)
        failed: list[str] = []

        async def start_node(node: str) -> None:
            reply = await sessions[node].call(start)
            if isinstance(reply, proto.Status):
                statuses[node] = reply
            else:
                failed.append(f"{node}: {_describe(reply)}")

        async def poll_node(node: str) -> None:
            t0 = clock.now_us()
            reply = await sessions[node].call(proto.StatusRequest())
            if isinstance(reply, proto.Status):
                statuses[node] = reply
                reply_offset[node] = reply.agent_now_us - (t0 + clock.now_us()) // 2
            else:
                failed.append(f"{node}: {_describe(reply)}")

        async def fetch_node(node: str) -> None:
            reply = await sessions[node].call(proto.FetchRequest())
            if isinstance(reply, proto.Capture):
                (run_dir / CAPTURE_DIR / f"{node}.pcap").write_bytes(reply.data)
            else:
                failed.append(f"{node}: fetch failed: {_describe(reply)}")

        reply_offset: dict[str, int] = {}
        (run_dir / CAPTURE_DIR).mkdir(exist_ok=True)
        try:
            await asyncio.gather(*(start_node(n) for n in nodes))
            active = [n for n in nodes if not statuses[n].finished]
            while active:
                await sleep_until(clock, clock.now_us() + cfg.poll_interval_us)
                await asyncio.gather(*(poll_node(n) for n in active))
                active = [n for n in active if not statuses[n].finished and not any(
                    f.startswith(f"{n}:") for f in failed)]
            await asyncio.gather(*(fetch_node(n) for n in nodes if statuses[n].finished))
        except (OSError, proto.ProtocolError) as exc:
            failed.append(f"control channel: {exc}")

        manifest.status = "failed" if failed else "completed"
        manifest.error = "; ".join(failed)
        manifest.nodes = {n: {**_status_dict(st), "clock_offset_us": reply_offset.get(n)}
                          for n, st in statuses.items()}
        manifest.dump(run_dir / RUN_MANIFEST)
        return RunResult(run_dir, manifest, statuses, split)
    finally:
        for sess in sessions.values():
            sess.close()


def _describe(reply: proto.Message) -> str:
    return reply.text if isinstance(reply, proto.Error) else type(reply).__name__


def _status_dict(st: proto.Status) -> dict:
    return {
        "phase": st.phase,
        "warnings": list(st.warnings),
        "connections": [dataclasses.asdict(c) for c in st.connections],
    }


# -- in-process simulation -----------------------------------------------------------


def sim_agents(nodes: list[str]) -> dict[str, AgentInfo]:
    """Agent table for simulated nodes; replay IPs are 10.255.x.y by node order."""
    return {
        node: AgentInfo(node, replay_ip=f"10.255.{i // 250}.{i % 250 + 1}")
        for i, node in enumerate(sorted(nodes))
    }


def simulate(
    input_pcap: str | os.PathLike,
    mapping: HostMapping,
    cfg: RunConfig,
    run_dir: str | os.PathLike,
    clock: VirtualClock | None = None,
    down: set[str] | frozenset[str] = frozenset(),
) -> RunResult:
    """Full controller/agent run in one process on virtual time.

    Nodes listed in ``down`` refuse control connections (for failure tests).
    """
    clock = clock or VirtualClock()
    link = cfg.link or LinkParams(seed=cfg.seed)

    async def main() -> RunResult:
        net = SimNetwork(clock, link)
        agents = {n: Agent(net.endpoint(n), clock) for n in mapping.nodes}
        serving: list[asyncio.Task] = []

        async def connect(node: str):
            if node in down or node not in agents:
                raise ConnectionRefusedError(f"simulated agent {node} is down")
            client, server = proto.memory_pipe()
            serving.append(asyncio.ensure_future(agents[node].serve(*server)))
            return client

        result = await run_controller(
            input_pcap, mapping, sim_agents(mapping.nodes), cfg, run_dir,
            clock=clock, connect=connect, mode="simulate",
        )
        await asyncio.gather(*serving, return_exceptions=True)
        return result

    return run_virtual(main(), clock)
