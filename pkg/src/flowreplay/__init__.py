"""Distributed replay of recorded TCP connections with timing analysis."""

from .analyzer import (
    ConnectionStats,
    PacketDeviation,
    aggregate,
    align,
    analyze_run,
    bucket_by_length,
    connection_stats,
    emit_csv,
)
from .clock import RealClock, VirtualClock, run_virtual
from .harness import LinkParams, SimNetwork
from .orchestrator import Agent, RunConfig, run_agent, run_controller, simulate
from .replay import DuplicatePolicy, ReplayConfig, ReplayOutcome, ReplayStatus, run_connection
from .schedule import Schedule, build_schedule, rebase_remote
from .splitter import ConnectionTrace, HostMapping, MappingError, split_trace
from .trace import PacketRecord, TcpFlags, Trace, read_pcap, write_pcap

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "ConnectionStats",
    "ConnectionTrace",
    "DuplicatePolicy",
    "HostMapping",
    "LinkParams",
    "MappingError",
    "PacketDeviation",
    "PacketRecord",
    "RealClock",
    "ReplayConfig",
    "ReplayOutcome",
    "ReplayStatus",
    "RunConfig",
    "Schedule",
    "SimNetwork",
    "TcpFlags",
    "Trace",
    "VirtualClock",
    "aggregate",
    "align",
    "analyze_run",
    "bucket_by_length",
    "build_schedule",
    "connection_stats",
    "emit_csv",
    "read_pcap",
    "rebase_remote",
    "run_agent",
    "run_connection",
    "run_controller",
    "run_virtual",
    "simulate",
    "split_trace",
    "write_pcap",
]
