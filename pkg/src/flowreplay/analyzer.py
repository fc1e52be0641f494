"""Timing deviation of a replay against the original capture.

A packet's deviation is ``expected - recorded`` where the expected time is the
sync epoch plus the connection's offset plus the packet's original time since
the connection's first packet. Negative values mean the packet showed up late.
Everything is kept in integer microseconds; summaries print milliseconds.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .schedule import without_duplicates
from .splitter import ConnectionTrace, read_plan
from .trace import PcapError, Trace, TcpFlags, read_pcap

logger = logging.getLogger(__name__)

METRICS = ("min", "max", "mean", "median", "stddev")
BUCKETS = (("3-10", 3, 10), ("11-50", 11, 50), ("51-100", 51, 100), (">100", 101, None))
DEVIATIONS_CSV = "deviations.csv"
CONNECTIONS_CSV = "connections.csv"
BUCKETS_CSV = "buckets.csv"
SUMMARY_TXT = "summary.txt"

DEVIATION_HEADER = ("connection_id", "packet_index", "direction", "expected_us", "recorded_us", "deviation_us")
CONNECTION_HEADER = ("connection_id", "packets", "min_us", "max_us", "mean_us", "median_us", "stddev_us")
BUCKET_HEADER = ("bucket", "agg_kind", "metric", "value_us", "count")


class MissingInputError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class PacketDeviation:
    connection_id: int
    packet_index: int
    direction: str  # "fwd": initiator to responder, "rev": the other way
    expected_us: int
    recorded_us: int | None
    deviation_us: int | None

    @property
    def missing(self) -> bool:
        return self.recorded_us is None


@dataclass(frozen=True)
class ConnectionStats:
    min_us: int
    max_us: int
    mean_us: float
    median_us: int
    stddev_us: float
    packet_count: int

    def metric(self, name: str) -> float:
        return getattr(self, f"{name}_us")


@dataclass
class Alignment:
    deviations: list[PacketDeviation]
    warnings: list[str] = field(default_factory=list)

    @property
    def missing(self) -> list[PacketDeviation]:
        return [d for d in self.deviations if d.missing]

    def values(self) -> list[int]:
        return [d.deviation_us for d in self.deviations if d.deviation_us is not None]


def _sub_connection(captured: Trace | Sequence, port: int) -> list:
    packets = captured.packets if isinstance(captured, Trace) else captured
    return [p for p in packets if port in (p.src_port, p.dst_port)]


def align(original: ConnectionTrace, captured: Trace | Sequence, sync_epoch_us: int,
          packets: Sequence | None = None) -> Alignment:
    """Pair original packets with captured ones by (direction, per-direction index).

    ``packets`` overrides the original packet list (e.g. with duplicates
    removed); times are still taken relative to the connection's first packet.
    A lost packet shifts its direction's pairing; that is reported, not repaired.
    """
    orig = list(original.packets if packets is None else packets)
    first_ts = original.first_ts
    cap = _sub_connection(captured, original.replay_port)
    fwd_src = next(
        (p.src_ip for p in cap if p.flags & (TcpFlags.SYN | TcpFlags.ACK) == TcpFlags.SYN),
        cap[0].src_ip if cap else None,
    )
    by_dir = {
        "fwd": [p for p in cap if p.src_ip == fwd_src],
        "rev": [p for p in cap if p.src_ip != fwd_src],
    }
    seen = {"fwd": 0, "rev": 0}
    devs = []
    warnings = []
    for i, p in enumerate(orig):
        direction = "fwd" if p.src_ip == original.initiator_ip else "rev"
        k = seen[direction]
        seen[direction] += 1
        expected = sync_epoch_us + original.offset_us + (p.ts_us - first_ts)
        if k < len(by_dir[direction]):
            got = by_dir[direction][k]
            if int(got.flags) != int(p.flags) or len(got.payload) != len(p.payload):
                warnings.append(
                    f"connection {original.stream_index} packet {i}: captured "
                    f"{got.flags!s}/{len(got.payload)} vs original {p.flags!s}/{len(p.payload)}"
                )
            devs.append(PacketDeviation(original.stream_index, i, direction, expected,
                                        got.ts_us, expected - got.ts_us))
        else:
            devs.append(PacketDeviation(original.stream_index, i, direction, expected, None, None))
    for direction, got in by_dir.items():
        extra = len(got) - seen[direction]
        if extra > 0:
            warnings.append(f"connection {original.stream_index}: {extra} extra {direction} packets captured")
    return Alignment(devs, warnings)


def connection_stats(devs: Iterable[int | PacketDeviation]) -> ConnectionStats:
    """Exact min/max/lower median, mean and population standard deviation."""
    values = [d.deviation_us if isinstance(d, PacketDeviation) else d for d in devs]
    values = [v for v in values if v is not None]
    if not values:
        raise ValueError("no deviations to summarise")
    a = np.sort(np.asarray(values, dtype=np.int64))
    return ConnectionStats(
        min_us=int(a[0]),
        max_us=int(a[-1]),
        mean_us=float(a.mean(dtype=np.float64)),
        median_us=int(a[(len(a) - 1) // 2]),
        stddev_us=float(a.std(dtype=np.float64)),
        packet_count=len(a),
    )


def _lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class Aggregate:
    """Per-metric series sorted by value, with overall mean/median and outliers.

    Outliers are values outside the 1.5 IQR fences of their metric.
    """

    series: dict[str, list[float]]
    overall_mean: dict[str, float]
    overall_median: dict[str, float]
    outliers: dict[str, list[float]]

    @property
    def count(self) -> int:
        return len(self.series["min"])


def aggregate(stats: Sequence[ConnectionStats]) -> Aggregate:
    if not stats:
        raise ValueError("no connections to aggregate")
    series, means, medians, outliers = {}, {}, {}, {}
    for m in METRICS:
        values = sorted(s.metric(m) for s in stats)
        series[m] = values
        means[m] = float(np.mean(values))
        medians[m] = _lower_median(values)
        q1, q3 = np.percentile(values, [25, 75])
        lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
        outliers[m] = [v for v in values if v < lo or v > hi]
    return Aggregate(series, means, medians, outliers)


@dataclass(frozen=True)
class BucketStats:
    label: str
    count: int
    mean: dict[str, float]
    median: dict[str, float]


def bucket_of(length: int) -> str | None:
    for label, lo, hi in BUCKETS:
        if length >= lo and (hi is None or length <= hi):
            return label
    return None


def bucket_by_length(stats: Sequence[ConnectionStats],
                     lengths: Sequence[int] | None = None) -> tuple[list[BucketStats], list[str]]:
    """Group connections by packet count; returns (non-empty buckets, empty bucket labels).

    ``lengths`` defaults to each entry's ``packet_count``.
    """
    lengths = [s.packet_count for s in stats] if lengths is None else list(lengths)
    if len(lengths) != len(stats):
        raise ValueError("one length per connection required")
    groups: dict[str, list[ConnectionStats]] = {label: [] for label, _, _ in BUCKETS}
    for s, n in zip(stats, lengths):
        label = bucket_of(n)
        if label is None:
            raise ValueError(f"connection of {n} packets fits no bucket")
        groups[label].append(s)
    out, empty = [], []
    for label, _, _ in BUCKETS:
        members = groups[label]
        if not members:
            empty.append(label)
            continue
        out.append(BucketStats(
            label,
            len(members),
            {m: float(np.mean([s.metric(m) for s in members])) for m in METRICS},
            {m: _lower_median([s.metric(m) for s in members]) for m in METRICS},
        ))
    return out, empty


# -- reports -----------------------------------------------------------------------


@dataclass
class ConnectionReport:
    connection_id: int
    name: str
    packets: int
    stats: ConnectionStats | None
    missing: int = 0


@dataclass
class Report:
    deviations: list[PacketDeviation] = field(default_factory=list)
    connections: list[ConnectionReport] = field(default_factory=list)
    buckets: list[BucketStats] = field(default_factory=list)
    empty_buckets: list[str] = field(default_factory=list)
    aggregate: Aggregate | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def missing_count(self) -> int:
        return sum(1 for d in self.deviations if d.missing)


def build_report(items: Sequence[tuple[ConnectionTrace, Alignment]]) -> Report:
    """Assemble a report from aligned connections, ordered by connection id."""
    report = Report()
    scored = []
    for conn, al in sorted(items, key=lambda it: it[0].stream_index):
        report.deviations.extend(al.deviations)
        report.warnings.extend(al.warnings)
        values = al.values()
        stats = connection_stats(values) if values else None
        report.connections.append(ConnectionReport(
            conn.stream_index, conn.name, len(al.deviations), stats, len(al.missing)))
        if stats is not None:
            scored.append((stats, len(al.deviations)))
    if scored:
        report.aggregate = aggregate([s for s, _ in scored])
        report.buckets, report.empty_buckets = bucket_by_length(
            [s for s, _ in scored], [n for _, n in scored])
    else:
        report.empty_buckets = [label for label, _, _ in BUCKETS]
    return report


def _cell(v) -> str:
    return "" if v is None else str(int(round(v)))


def csv_rows(report: Report) -> tuple[list[tuple], list[tuple], list[tuple]]:
    """The three CSV tables as tuples of ints/strings (None for blanks)."""
    def r(v):
        return None if v is None else int(round(v))

    devs = [(d.connection_id, d.packet_index, d.direction, d.expected_us, d.recorded_us, d.deviation_us)
            for d in report.deviations]
    conns = []
    for c in report.connections:
        s = c.stats
        conns.append((c.connection_id, c.packets) + (
            tuple(r(s.metric(m)) for m in METRICS) if s else (None,) * len(METRICS)))
    buckets = [
        (b.label, kind, m, r(getattr(b, kind)[m]), b.count)
        for b in report.buckets for kind in ("mean", "median") for m in METRICS
    ]
    return devs, conns, buckets


def emit_csv(report: Report, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, header, rows in zip((DEVIATIONS_CSV, CONNECTIONS_CSV, BUCKETS_CSV),
                                  (DEVIATION_HEADER, CONNECTION_HEADER, BUCKET_HEADER),
                                  csv_rows(report)):
        path = out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(["" if v is None else v for v in row] for row in rows)
        paths.append(path)
    return paths


def read_csv(out_dir: str | os.PathLike) -> tuple[list[tuple], list[tuple], list[tuple]]:
    """Parse files written by :func:`emit_csv` back into :func:`csv_rows` form."""
    def num(v: str):
        return None if v == "" else int(v)

    def load(name: str, header: tuple) -> list[list[str]]:
        with open(Path(out_dir) / name, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != header:
            raise ValueError(f"{name}: unexpected header")
        return rows[1:]

    devs = [(int(a), int(b), c, int(d), num(e), num(f))
            for a, b, c, d, e, f in load(DEVIATIONS_CSV, DEVIATION_HEADER)]
    conns = [(int(row[0]), int(row[1])) + tuple(num(v) for v in row[2:])
             for row in load(CONNECTIONS_CSV, CONNECTION_HEADER)]
    buckets = [(a, b, c, int(d), int(e)) for a, b, c, d, e in load(BUCKETS_CSV, BUCKET_HEADER)]
    return devs, conns, buckets


def _ms(us: float) -> str:
    return f"{us / 1000:.3f}"


def summary_text(report: Report) -> str:
    lines = [
        "connections: %d, packets: %d, missing: %d, warnings: %d" % (
            len(report.connections), len(report.deviations), report.missing_count, len(report.warnings)),
        "deviation = expected - recorded (negative: late); per-metric series sorted by value",
    ]
    agg = report.aggregate
    if agg is None:
        lines.append("no aligned packets")
    else:
        lines.append("overall median deviation: %s ms" % _ms(agg.overall_median["median"]))
        lines.append("overall mean deviation: %s ms" % _ms(agg.overall_mean["mean"]))
        lines.append("metric     mean(ms)   median(ms)  outliers")
        for m in METRICS:
            lines.append("%-8s %10s %12s  %d" % (
                m, _ms(agg.overall_mean[m]), _ms(agg.overall_median[m]), len(agg.outliers[m])))
        for m in METRICS:
            if agg.outliers[m]:
                shown = ", ".join(f"{v / 1e6:.3f}" for v in agg.outliers[m][:10])
                lines.append(f"outliers {m} (s): {shown}")
    for b in report.buckets:
        lines.append("bucket %-6s n=%-4d median of medians %s ms, mean of means %s ms" % (
            b.label, b.count, _ms(b.median["median"]), _ms(b.mean["mean"])))
    for label in report.empty_buckets:
        lines.append(f"bucket {label}: no connections")
    return "\n".join(lines) + "\n"


def analyze_run(run_dir: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> Report:
    """Align every connection of a run directory, write CSVs and ``summary.txt``.

    Raises :class:`MissingInputError` when the run manifest, split files or a
    needed capture are absent.
    """
    from .orchestrator import CAPTURE_DIR, RUN_MANIFEST, SPLIT_DIR

    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    manifest_path = run_dir / RUN_MANIFEST
    if not manifest_path.exists():
        raise MissingInputError(f"no {RUN_MANIFEST} in {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    try:
        plan = read_plan(run_dir / SPLIT_DIR)
    except FileNotFoundError as exc:
        raise MissingInputError(f"split files missing: {exc}") from exc
    sync = manifest.get("sync_epoch_us")
    drop = manifest.get("duplicate_policy") == "drop-duplicates"

    captures: dict[str, Trace] = {}
    warnings = []
    items = []
    for c in plan.connections:
        init_node, _ = plan.endpoints[c.name]
        if init_node not in captures:
            path = run_dir / CAPTURE_DIR / f"{init_node}.pcap"
            if sync is None or not path.exists():
                raise MissingInputError(f"capture for node {init_node} missing: {path}")
            try:
                captures[init_node] = read_pcap(path)
            except PcapError as exc:
                warnings.append(f"{path.name}: unreadable capture ({exc}); treated as empty")
                captures[init_node] = Trace(())
        packets = without_duplicates(c.packets) if drop else None
        items.append((c, align(c, captures[init_node], sync, packets)))
    report = build_report(items)
    report.warnings[:0] = warnings
    emit_csv(report, out)
    (out / SUMMARY_TXT).write_text(summary_text(report))
    return report
