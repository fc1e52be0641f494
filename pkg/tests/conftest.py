import random
import struct

import dpkt
import pytest

from flowreplay.splitter import HostMapping, assign_ports, compute_offsets, extract_flows, filter_handshakes
from flowreplay.synth import Conversation, handshake_trace
from flowreplay.trace import TcpFlags, Trace

F = TcpFlags
T0 = 1_600_000_000_000_000


def ref_ones_complement(data: bytes) -> int:
    """Byte-by-byte RFC 1071 reference: 16-bit words, end-around carry, complement."""
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) + data[i + 1]
        while total > 0xFFFF:
            total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ref_packet_checksums_ok(ip_bytes: bytes) -> bool:
    """Verify IPv4 and TCP checksums with the reference sum (result of summing must be 0)."""
    ihl = (ip_bytes[0] & 0x0F) * 4
    total = struct.unpack_from("!H", ip_bytes, 2)[0]
    if ref_ones_complement(ip_bytes[:ihl]) != 0:
        return False
    seg = ip_bytes[ihl:total]
    pseudo = ip_bytes[12:20] + bytes([0, 6]) + struct.pack("!H", len(seg))
    return ref_ones_complement(pseudo + seg) == 0


def dpkt_pcap(frames, nano=False, endian="<", linktype=1) -> bytes:
    """Reference pcap writer: frames is a list of (ts_seconds_float_or_tuple, bytes)."""
    magic = 0xA1B23C4D if nano else 0xA1B2C3D4
    out = [struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)]
    for ts, frame in frames:
        sec, frac = ts if isinstance(ts, tuple) else (int(ts), round((ts - int(ts)) * (1e9 if nano else 1e6)))
        out.append(struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame)
    return b"".join(out)


def dpkt_frame(src, dst, sport, dport, seq, ack, flags, payload=b"", ip_id=1) -> bytes:
    """Ethernet/IPv4/TCP frame with checksums computed by dpkt."""
    tcp = dpkt.tcp.TCP(sport=sport, dport=dport, seq=seq, ack=ack, flags=flags, win=65535, data=payload)
    ip = dpkt.ip.IP(src=bytes(map(int, src.split("."))), dst=bytes(map(int, dst.split("."))),
                    p=dpkt.ip.IP_PROTO_TCP, id=ip_id, ttl=64, df=1, data=tcp)
    ip.len = 20 + len(bytes(tcp))
    eth = dpkt.ethernet.Ethernet(dst=b"\x02\x00\x00\x00\x00\x0b", src=b"\x02\x00\x00\x00\x00\x0a",
                                 type=dpkt.ethernet.ETH_TYPE_IP, data=ip)
    return bytes(eth)


def dpkt_packets(data: bytes):
    """(ts, src, dst, sport, dport, seq, ack, flags, payload) via dpkt's reader."""
    import io

    out = []
    for ts, buf in dpkt.pcap.Reader(io.BytesIO(data)):
        eth = dpkt.ethernet.Ethernet(buf)
        ip = eth.data
        tcp = ip.data
        out.append((ts, ".".join(map(str, ip.src)), ".".join(map(str, ip.dst)),
                    tcp.sport, tcp.dport, tcp.seq, tcp.ack, tcp.flags, bytes(tcp.data)))
    return out


def conv(client=("10.0.0.1", 40000), server=("10.0.0.2", 80), start=T0, **kw) -> Conversation:
    return Conversation(client, server, start, **kw)


def flows_of(trace: Trace, source="fx"):
    return compute_offsets(assign_ports(filter_handshakes(extract_flows(trace, source))))


def request_response(start=T0, n=3, gap_us=100_000, size=200, client=("10.0.0.1", 40000),
                     server=("10.0.0.2", 80)) -> Conversation:
    """Handshake, n request/response rounds with generous gaps, close."""
    c = conv(client, server, start).handshake((0, gap_us, gap_us))
    for _ in range(n):
        c.add(True, gap_us, F.PSH | F.ACK, size)
        c.add(False, gap_us, F.PSH | F.ACK, size)
    return c.close(gap_us)


def server_push(start=T0, n=8, gap_us=100_000, size=300, client=("10.0.0.1", 40000),
                server=("10.0.0.2", 80)) -> Conversation:
    """Handshake, then the responder streams n segments; most packets travel responder to initiator."""
    c = conv(client, server, start).handshake((0, gap_us, gap_us))
    for _ in range(n):
        c.add(False, gap_us, F.PSH | F.ACK, size)
    return c.close(gap_us)


def retransmission_conversation(start=T0) -> Conversation:
    """A connection whose capture contains an original data retransmission."""
    c = conv(start=start).handshake()
    c.add(True, 1000, F.PSH | F.ACK, 100)
    c.retransmit_last(200_000)
    c.add(False, 1000, F.ACK)
    c.add(False, 1000, F.PSH | F.ACK, 50)
    c.add(True, 1000, F.ACK)
    return c.close()


@pytest.fixture
def hs_trace():
    return handshake_trace(T0)


@pytest.fixture
def two_node_map():
    return HostMapping({"10.0.0.1": "a", "10.0.0.2": "b"})


@pytest.fixture
def rng():
    return random.Random(1234)



def replay_pair(c, params=None, cfg=None, clock=None, lead_us=1000, taps=(None, None)):
    """Replay connection ``c`` between two engines over a simulated link.

    Returns (initiator outcome, responder outcome, initiator schedule, start epoch).
    """
    import asyncio

    from flowreplay.clock import VirtualClock, run_virtual
    from flowreplay.harness import LinkParams, simulated_link
    from flowreplay.replay import ReplayConfig, run_connection
    from flowreplay.schedule import build_schedule

    clock = clock or VirtualClock()
    params = params or LinkParams()
    cfg = cfg or ReplayConfig()

    async def main():
        a, b = simulated_link(params, clock, taps)
        start = clock.now_us() + lead_us
        sa = build_schedule(c, True, "10.9.0.1", "10.9.0.2", start, 1)
        sb = build_schedule(c, False, "10.9.0.2", "10.9.0.1", start, 2)
        if taps[0] is not None:
            taps[0].watch(c.replay_port, "10.9.0.1")
        ca = a.open(c.replay_port, "10.9.0.1", "B")
        cb = b.open(c.replay_port, "10.9.0.2", "A")
        ra, rb = await asyncio.gather(run_connection(sa, ca, clock, cfg), run_connection(sb, cb, clock, cfg))
        return ra, rb, sa, start

    return run_virtual(main(), clock)
