#!/usr/bin/env python3
"""
Quickstart: split a capture, replay it on a simulated network, read the report.

Everything happens in a temporary directory and on virtual time, so the
whole walk-through finishes in a couple of seconds.
"""

import tempfile
from pathlib import Path

from flowreplay import HostMapping, LinkParams, RunConfig, analyze_run, simulate, split_trace, write_pcap
from flowreplay.synth import desk_trace

work = Path(tempfile.mkdtemp(prefix="flowreplay-demo-"))

# A synthetic capture: 20 overlapping TCP connections between 6 clients and 4 servers
trace = desk_trace(20, seed=3)
pcap = work / "desk.pcap"
write_pcap(trace, pcap)
print(f"capture: {len(trace)} packets -> {pcap}")

# Every original IP is assigned to a replay node. Here clients share one node, servers another.
hosts = sorted({p.src_ip for p in trace.packets} | {p.dst_ip for p in trace.packets})
mapping = HostMapping({ip: "clients" if ip.startswith("192.168.") else "servers" for ip in hosts})

# Splitting alone (no replay) shows what each node would receive
split = split_trace(trace, mapping, base_port=20000, source_name="desk")
print(f"kept {split.kept} connections, dropped {split.dropped} without a full handshake")
for node, conns in split.plan.nodes.items():
    print(f"  {node}: {len(conns)} files, first one {conns[0].name}")

# Replay over a link with 2 ms one-way delay and a little jitter
cfg = RunConfig(base_port=20000, seed=1, link=LinkParams(one_way_delay_us=2000, jitter_us=300, seed=1))
result = simulate(pcap, mapping, cfg, work / "run")
print(f"\nreplay ok: {result.ok}")

report = analyze_run(work / "run")
print()
print((work / "run" / "summary.txt").read_text())
print("per-connection medians (us):", [c.stats.median_us for c in report.connections][:10], "...")
print(f"CSV files are in {work / 'run'}")
