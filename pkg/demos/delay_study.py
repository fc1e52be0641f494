#!/usr/bin/env python3
"""
How link delay shows up in the deviation metrics.

The same capture is replayed over links with increasing one-way delay.
Packets the initiator sends are recorded when sent, so they stay on time.
Packets coming back from the responder arrive one delay late, so their
deviation is the negative delay. The per-connection median follows
whichever direction carries most of the packets.
"""

import tempfile
from pathlib import Path

import numpy as np

from flowreplay import HostMapping, LinkParams, RunConfig, TcpFlags, Trace, analyze_run, simulate, write_pcap
from flowreplay.synth import Conversation, interleave

F = TcpFlags
T0 = 1_600_000_000_000_000
work = Path(tempfile.mkdtemp(prefix="flowreplay-delay-"))


def download(start, port, segments):
    """Client opens, server streams, client closes. Gaps of 100 ms keep every send on schedule."""
    c = Conversation(("10.0.0.1", port), ("10.0.0.2", 80), start).handshake((0, 100_000, 100_000))
    for _ in range(segments):
        c.add(False, 100_000, F.PSH | F.ACK, 512)
    return c.close(100_000).packets


trace = interleave(*(download(T0 + 250_000 * i, 40000 + i, 4 + 3 * i) for i in range(5)))
pcap = work / "downloads.pcap"
write_pcap(trace, pcap)
mapping = HostMapping({"10.0.0.1": "client", "10.0.0.2": "server"})

print("delay_ms  fwd_dev_ms  rev_dev_ms  median_of_medians_ms")
for delay_ms in (0, 5, 10, 30, 60):
    cfg = RunConfig(base_port=20000, link=LinkParams(one_way_delay_us=delay_ms * 1000))
    run = work / f"run-{delay_ms}"
    simulate(pcap, mapping, cfg, run)
    report = analyze_run(run)
    fwd = np.array([d.deviation_us for d in report.deviations if d.direction == "fwd"])
    rev = np.array([d.deviation_us for d in report.deviations if d.direction == "rev"])
    med = report.aggregate.overall_median["median"]
    print(f"{delay_ms:8d}  {fwd.mean() / 1000:10.3f}  {rev.mean() / 1000:10.3f}  {med / 1000:20.3f}")

# With jitter the shift is no longer a single number; the spread shows up in stddev
cfg = RunConfig(base_port=20000, link=LinkParams(one_way_delay_us=10_000, jitter_us=4_000, seed=7))
simulate(pcap, mapping, cfg, work / "run-jitter")
report = analyze_run(work / "run-jitter")
print("\n10 ms delay with 4 ms jitter, per connection:")
print("  id  packets  median_ms  stddev_ms")
for c in report.connections:
    print(f"  {c.connection_id:2d}  {c.packets:7d}  {c.stats.median_us / 1000:9.3f}  {c.stats.stddev_us / 1000:9.3f}")
