import asyncio
import datetime as dt

import pytest

from conftest import T0, conv, request_response
from flowreplay import protocol as proto
from flowreplay.clock import VirtualClock, run_virtual
from flowreplay.harness import LinkParams, SimNetwork
from flowreplay.orchestrator import (
    Agent,
    AgentUnreachable,
    PeerInfo,
    RunConfig,
    RunManifest,
    format_peers,
    load_agents,
    make_run_dir,
    parse_peers,
    run_controller,
    sim_agents,
    simulate,
)
from flowreplay.splitter import HostMapping, split_trace
from flowreplay.synth import handshake_trace, interleave
from flowreplay.trace import TcpFlags, Trace, parse_pcap, pcap_bytes, write_pcap

F = TcpFlags
CFG = RunConfig(base_port=20000, lead_time_us=100_000)


@pytest.fixture
def hs_pcap(tmp_path):
    path = tmp_path / "hs.pcap"
    write_pcap(handshake_trace(T0), path)
    return path


def sim_run(pcap, mapping, run_dir, down=(), cfg=CFG):
    """Like simulate() but exposes the agents and the messages each one received."""
    clock = VirtualClock()
    seen: dict[str, list] = {n: [] for n in mapping.nodes}

    async def main():
        net = SimNetwork(clock, LinkParams())
        agents = {n: Agent(net.endpoint(n), clock) for n in mapping.nodes}
        tasks = []

        async def connect(node):
            if node in down:
                raise ConnectionRefusedError("down")
            client, server = proto.memory_pipe()
            agent = agents[node]

            async def handle(msg, _orig=agent.handle):
                seen[node].append(type(msg).__name__)
                return await _orig(msg)

            agent.handle = handle
            tasks.append(asyncio.ensure_future(agent.serve(*server)))
            return client

        try:
            return await run_controller(pcap, mapping, sim_agents(mapping.nodes), cfg, run_dir,
                                        clock=clock, connect=connect, mode="simulate")
        finally:
            await asyncio.gather(*tasks, return_exceptions=True)

    try:
        return run_virtual(main(), clock), seen
    except AgentUnreachable as exc:
        exc.seen = seen
        raise


def test_two_agents_handshake(hs_pcap, two_node_map, tmp_path):
    run = tmp_path / "run"
    res = simulate(hs_pcap, two_node_map, CFG, run)
    assert res.ok
    assert sorted(p.name for p in (run / "captures").iterdir()) == ["a.pcap", "b.pcap"]
    cap_a = parse_pcap((run / "captures" / "a.pcap").read_bytes())
    cap_b = parse_pcap((run / "captures" / "b.pcap").read_bytes())
    # only the initiator side records
    assert [p.flags for p in cap_a.packets] == [F.SYN, F.SYN | F.ACK, F.ACK]
    assert len(cap_b) == 0
    assert {(p.src_port, p.dst_port) for p in cap_a.packets} == {(20000, 20000)}
    m = RunManifest.load(run / "run.json")
    assert m.status == "completed" and m.kept == 1 and m.sync_epoch_us is not None
    assert (run / "split" / "a").is_dir() and (run / "split" / "b").is_dir()


def test_capture_timestamps_follow_the_schedule(hs_pcap, two_node_map, tmp_path):
    res = simulate(hs_pcap, two_node_map, CFG, tmp_path / "r")
    cap = parse_pcap((tmp_path / "r" / "captures" / "a.pcap").read_bytes())
    orig = handshake_trace(T0).packets
    sync = res.manifest.sync_epoch_us
    assert [p.ts_us - sync for p in cap.packets] == [p.ts_us - orig[0].ts_us for p in orig]


def test_synchronized_start_offsets(two_node_map, tmp_path):
    a = request_response(T0, n=1)
    b = request_response(T0 + 1_000_000, n=1, client=("10.0.0.1", 40001))
    path = tmp_path / "in.pcap"
    write_pcap(interleave(a.packets, b.packets), path)
    res = simulate(path, two_node_map, CFG, tmp_path / "r")
    assert res.ok
    firsts = sorted(c.first_send_us for c in res.statuses["a"].connections if c.initiator)
    assert firsts[1] - firsts[0] == 1_000_000
    assert firsts[0] == res.manifest.sync_epoch_us


def test_zero_connections_completes_trivially(two_node_map, tmp_path):
    c = conv()
    c.add(True, 0, F.SYN)
    c.add(False, 10, F.SYN | F.ACK)
    path = tmp_path / "short.pcap"
    write_pcap(Trace(tuple(c.packets)), path)
    res = simulate(path, two_node_map, CFG, tmp_path / "r")
    assert res.ok
    assert res.manifest.kept == 0 and res.manifest.dropped == 1
    assert res.connection_states == []


def test_unreachable_agent_fails_before_start(hs_pcap, two_node_map, tmp_path):
    with pytest.raises(AgentUnreachable) as info:
        sim_run(hs_pcap, two_node_map, tmp_path / "r", down={"b"})
    assert "Start" not in info.value.seen["a"]
    m = RunManifest.load(tmp_path / "r" / "run.json")
    assert m.status == "failed" and "b" in m.error
    assert not (tmp_path / "r" / "captures").exists()


def test_every_node_receives_the_full_sequence(hs_pcap, two_node_map, tmp_path):
    res, seen = sim_run(hs_pcap, two_node_map, tmp_path / "r")
    assert res.ok
    for node in "ab":
        msgs = seen[node]
        assert msgs[:2] == ["Upload", "Start"]
        assert msgs[-1] == "FetchRequest"
        assert set(msgs[2:-1]) <= {"StatusRequest"}


def test_missing_agent_entry_is_unreachable(hs_pcap, two_node_map, tmp_path):
    async def main():
        return await run_controller(hs_pcap, two_node_map, sim_agents(["a"]), CFG, tmp_path / "r",
                                    clock=VirtualClock())

    with pytest.raises(AgentUnreachable, match="b"):
        asyncio.run(main())


def test_simulation_is_deterministic(two_node_map, tmp_path):
    path = tmp_path / "in.pcap"
    write_pcap(interleave(request_response(T0, 2).packets,
                          request_response(T0 + 5000, 2, client=("10.0.0.2", 5000),
                                           server=("10.0.0.1", 443)).packets), path)
    cfg = RunConfig(base_port=20000, seed=3, link=LinkParams(one_way_delay_us=700, jitter_us=300, seed=3))
    r1 = simulate(path, two_node_map, cfg, tmp_path / "r1")
    r2 = simulate(path, two_node_map, cfg, tmp_path / "r2")
    assert r1.ok and r2.ok
    for node in "ab":
        assert (tmp_path / "r1" / "captures" / f"{node}.pcap").read_bytes() == \
            (tmp_path / "r2" / "captures" / f"{node}.pcap").read_bytes()


# agent message handling in isolation


def agent_call(*msgs):
    clock = VirtualClock()

    async def main():
        net = SimNetwork(clock, LinkParams())
        agent = Agent(net.endpoint("a"), clock)
        out = []
        for m in msgs:
            out.append(await agent.handle(m))
            await asyncio.sleep(0)
        return out

    return run_virtual(main(), clock)


def upload_for(files, node="a"):
    split = split_trace(handshake_trace(T0), HostMapping({"10.0.0.1": "a", "10.0.0.2": "b"}), 20000, "hs")
    peers = format_peers({n: PeerInfo(n, ip, None) for n, ip in (("a", "10.255.0.1"), ("b", "10.255.0.2"))})
    if files is None:
        files = {c.name: pcap_bytes(c.to_trace()) for c in split.plan.nodes[node]}
    return proto.Upload(node, split.plan.manifest_text(), peers, CFG.options_text(), files)


def test_idle_status_is_empty():
    (st,) = agent_call(proto.StatusRequest())
    assert isinstance(st, proto.Status)
    assert st.phase == "idle" and st.connections == []


def test_start_before_upload_is_error():
    (r,) = agent_call(proto.Start(T0, 0))
    assert isinstance(r, proto.Error)


def test_fetch_before_completion_is_error():
    up, fetch = agent_call(upload_for(None), proto.FetchRequest())
    assert up.phase == "uploaded"
    assert isinstance(fetch, proto.Error)


def test_duplicate_start_warns():
    _, s1, s2 = agent_call(upload_for(None), proto.Start(T0, 0), proto.Start(T0, 0))
    assert s1.phase == "running"
    assert any("duplicate start" in w for w in s2.warnings)


def test_undecodable_filename_rejected():
    (st,) = agent_call(upload_for({"garbage.pcap": b""}))
    assert isinstance(st, proto.Status)
    (c,) = st.connections
    assert c.state == "rejected" and c.name == "garbage.pcap"
    assert any("not uploaded" in w for w in st.warnings)


def test_unreadable_file_rejected():
    name = next(iter(upload_for(None).files))
    (st,) = agent_call(upload_for({name: b"not a pcap"}))
    assert st.connections[0].state == "rejected"
    assert "unreadable" in st.connections[0].reason


def test_peer_table_round_trip():
    peers = {"a": PeerInfo("a", "10.0.0.1", ("h1", 9001)), "b": PeerInfo("b", "10.0.0.2", None)}
    assert parse_peers(format_peers(peers)) == peers


def test_load_agents(tmp_path):
    p = tmp_path / "agents.txt"
    p.write_text("# comment\na 127.0.0.1:7000\nb 127.0.0.1:7100 127.0.0.1:7200\n")
    agents = load_agents(p)
    assert agents["a"].control == ("127.0.0.1", 7000)
    assert agents["a"].data == ("127.0.0.1", 7001)
    assert agents["b"].data == ("127.0.0.1", 7200)


def test_make_run_dir_never_reuses(tmp_path):
    now = dt.datetime(2024, 5, 6, 7, 8, 9)
    first = make_run_dir(tmp_path, now)
    second = make_run_dir(tmp_path, now)
    assert first.name == "run-20240506-070809"
    assert second.name == "run-20240506-070809-1"


def test_manifest_round_trip(tmp_path):
    m = RunManifest("simulate", "x.pcap", "x", {"10.0.0.1": "a"}, {}, 20000, 1, 5, "strict", 10,
                    link={"one_way_delay_us": 5, "jitter_us": 0, "loss_prob": 0.0,
                          "duplicate_prob": 0.0, "reorder": False, "seed": 0})
    m.dump(tmp_path / "run.json")
    back = RunManifest.load(tmp_path / "run.json")
    assert back == m
    assert back.run_config().link.one_way_delay_us == 5
