#!/usr/bin/env python3
"""
Why retransmissions in the original capture break a strict replay.

The capture below contains a data segment that the client sent twice. When
the server side of the replay sees the first copy it moves past that entry
in its schedule. The second copy then looks like a duplicate of something
already received, so it is ignored, and the entry waiting for it never
matches. The connection times out. Dropping the repeated packet from both
schedules before the replay lets the connection finish.
"""

import tempfile
from pathlib import Path

from flowreplay import DuplicatePolicy, HostMapping, RunConfig, TcpFlags, Trace, simulate, write_pcap
from flowreplay.synth import Conversation

F = TcpFlags
work = Path(tempfile.mkdtemp(prefix="flowreplay-dup-"))

c = Conversation(("10.0.0.1", 40000), ("10.0.0.2", 80), 1_600_000_000_000_000).handshake()
c.add(True, 1000, F.PSH | F.ACK, 100)
c.retransmit_last(200_000)
c.add(False, 1000, F.ACK)
c.add(False, 1000, F.PSH | F.ACK, 50)
c.add(True, 1000, F.ACK)
c.close()

print("original packets:")
for i, p in enumerate(c.packets):
    print(f"  {i:2d} {'client' if p.src_ip == '10.0.0.1' else 'server'} {p.flags!s:10} len={len(p.payload):3d} seq={p.seq}")

pcap = work / "retransmission.pcap"
write_pcap(Trace(tuple(c.packets)), pcap)
mapping = HostMapping({"10.0.0.1": "a", "10.0.0.2": "b"})

for policy in (DuplicatePolicy.STRICT, DuplicatePolicy.DROP_SCHEDULED_DUPLICATES):
    cfg = RunConfig(base_port=20000, duplicate_policy=policy, inactivity_timeout_us=2_000_000)
    result = simulate(pcap, mapping, cfg, work / policy.value)
    print(f"\npolicy {policy.value}: ok={result.ok}")
    for node, status in result.statuses.items():
        for conn in status.connections:
            role = "initiator" if conn.initiator else "responder"
            print(f"  {node} {role:9} {conn.state:10} sent={conn.sent} received={conn.received} "
                  f"duplicates={conn.duplicate} {conn.reason}")
