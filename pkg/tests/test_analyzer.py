import math
import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, flows_of, request_response
from flowreplay.analyzer import (
    BUCKET_HEADER,
    CONNECTION_HEADER,
    DEVIATION_HEADER,
    MissingInputError,
    aggregate,
    align,
    analyze_run,
    bucket_by_length,
    bucket_of,
    build_report,
    connection_stats,
    csv_rows,
    emit_csv,
    read_csv,
    summary_text,
)
from flowreplay.harness import LinkParams
from flowreplay.orchestrator import RunConfig, simulate
from flowreplay.splitter import HostMapping
from flowreplay.synth import interleave, random_conversation
from flowreplay.trace import TcpFlags, Trace, write_pcap

F = TcpFlags
SYNC = 1_700_000_000_000_000


def brute_stats(values):
    """Reference: sort and direct formulas, pure Python."""
    s = sorted(values)
    n = len(s)
    mean = sum(s) / n
    return s[0], s[-1], mean, s[(n - 1) // 2], math.sqrt(sum((v - mean) ** 2 for v in s) / n)


def rr_conn(n=3, gap=10_000, start=T0):
    return flows_of(Trace(tuple(request_response(start, n, gap).packets)))[0]


def replay_capture(c, sync=SYNC, shift=0, drop=()):
    """A capture exactly at the expected times (plus ``shift``), with indices in ``drop`` lost."""
    return Trace(tuple(
        replace(p, ts_us=sync + c.offset_us + p.ts_us - c.first_ts + shift)
        for i, p in enumerate(c.packets) if i not in drop
    ))


def test_stats_example():
    s = connection_stats([-1000, -3000, -2000])
    assert (s.min_us, s.max_us, s.mean_us, s.median_us) == (-3000, -1000, -2000, -2000)
    assert s.stddev_us == pytest.approx(math.sqrt(2e6 / 3))


def test_stats_single_element():
    s = connection_stats([42])
    assert s.min_us == s.max_us == s.mean_us == s.median_us == 42
    assert s.stddev_us == 0


def test_even_count_uses_lower_median():
    assert connection_stats([4, 1, 3, 2]).median_us == 2


def test_stats_empty_is_error():
    with pytest.raises(ValueError):
        connection_stats([])


@given(st.lists(st.integers(-(10**9), 10**9), min_size=1, max_size=200))
def test_stats_match_brute_force(values):
    s = connection_stats(values)
    lo, hi, mean, med, sd = brute_stats(values)
    assert (s.min_us, s.max_us, s.median_us) == (lo, hi, med)
    assert s.mean_us == pytest.approx(mean, rel=1e-9, abs=1e-6)
    assert s.stddev_us == pytest.approx(sd, rel=1e-9, abs=1e-3)
    assert s.min_us <= s.median_us <= s.max_us and s.stddev_us >= 0


def test_identical_capture_gives_zero_deviation():
    c = rr_conn()
    al = align(c, replay_capture(c), SYNC)
    assert al.values() == [0] * len(c.packets)
    assert al.warnings == []
    assert al.deviations[0].expected_us == SYNC


def test_five_ms_late_everywhere():
    c = rr_conn()
    assert set(align(c, replay_capture(c, shift=5000), SYNC).values()) == {-5000}


def test_lost_packet_reported_missing():
    c = rr_conn(n=3)
    # drop the last responder packet so alignment of the rest is unaffected
    last_rev = max(i for i, p in enumerate(c.packets) if p.src_ip == c.responder_ip)
    al = align(c, replay_capture(c, drop={last_rev}), SYNC)
    assert [d.packet_index for d in al.missing] == [last_rev]
    assert al.values() == [0] * (len(c.packets) - 1)


def test_empty_capture_is_all_missing():
    c = rr_conn()
    al = align(c, Trace(()), SYNC)
    assert len(al.missing) == len(c.packets)
    report = build_report([(c, al)])
    assert report.connections[0].stats is None and report.aggregate is None


def test_directions_and_other_ports_ignored():
    c = rr_conn()
    other = replace(c.packets[3], src_port=9, dst_port=9, ts_us=0)
    cap = Trace(replay_capture(c).packets + (other,))
    al = align(c, cap, SYNC)
    assert al.values() == [0] * len(c.packets)
    assert [d.direction for d in al.deviations[:3]] == ["fwd", "rev", "fwd"]


def test_flag_mismatch_warns():
    c = rr_conn()
    cap = replay_capture(c)
    bad = Trace((replace(cap.packets[0], flags=F.RST),) + cap.packets[1:])
    assert align(c, bad, SYNC).warnings


def test_aggregate_series_sorted_with_outliers():
    stats = [connection_stats([v]) for v in (5, -3, 1, 0, 2, -1, 4, 100_000)]
    agg = aggregate(stats)
    assert agg.series["median"] == sorted(agg.series["median"])
    assert agg.outliers["median"] == [100_000]
    assert agg.overall_median["median"] == 1
    assert aggregate(stats[:1]).series["min"] == [5]


def test_bucket_boundaries():
    assert [bucket_of(n) for n in (3, 10, 11, 50, 51, 100, 101)] == \
        ["3-10", "3-10", "11-50", "11-50", "51-100", "51-100", ">100"]
    stats = [connection_stats([0] * n) for n in (3, 40, 60, 150)]
    buckets, empty = bucket_by_length(stats)
    assert [(b.label, b.count) for b in buckets] == [("3-10", 1), ("11-50", 1), ("51-100", 1), (">100", 1)]
    assert empty == []


def test_empty_bucket_noted():
    stats = [connection_stats([0] * n) for n in (3, 4)]
    buckets, empty = bucket_by_length(stats)
    assert [b.label for b in buckets] == ["3-10"]
    assert empty == ["11-50", "51-100", ">100"]


def test_median_aggregate_resists_outlier_connection():
    stats = [connection_stats([-1000 - 10 * i] * 5) for i in range(6)]
    stats.append(connection_stats([-5_000_000] * 5))
    (b,), _ = bucket_by_length(stats)
    assert abs(b.median["median"]) < abs(b.mean["median"])


def test_median_robustness_is_one_order_step():
    base = [connection_stats([-100 * i] * 4) for i in range(1, 10)]
    (before,), _ = bucket_by_length(base)
    changed = base[:-1] + [connection_stats([-10**9] * 4)]
    (after,), _ = bucket_by_length(changed)
    ordered = sorted(s.median_us for s in base)
    k = ordered.index(before.median["median"])
    assert after.median["median"] in ordered[max(0, k - 1):k + 2]


def two_conn_report():
    conns = flows_of(interleave(request_response(T0, 3, 10_000).packets,
                                request_response(T0 + 2_000_000, 5, 10_000, client=("10.0.0.1", 40001)).packets))
    items = [(c, align(c, replay_capture(c, shift=-37 * c.stream_index), SYNC)) for c in conns]
    return build_report(items)


def test_csv_round_trip(tmp_path):
    report = two_conn_report()
    emit_csv(report, tmp_path)
    assert read_csv(tmp_path) == csv_rows(report)
    lines = (tmp_path / "connections.csv").read_text().splitlines()
    assert lines[0] == ",".join(CONNECTION_HEADER)
    assert len(lines) - 1 == len(report.connections) == 2


def test_empty_report_headers_only(tmp_path):
    emit_csv(build_report([]), tmp_path)
    for name, header in (("deviations.csv", DEVIATION_HEADER), ("connections.csv", CONNECTION_HEADER),
                         ("buckets.csv", BUCKET_HEADER)):
        assert (tmp_path / name).read_text() == ",".join(header) + "\n"


def test_missing_values_are_blank_cells(tmp_path):
    c = rr_conn()
    emit_csv(build_report([(c, align(c, Trace(()), SYNC))]), tmp_path)
    row = (tmp_path / "deviations.csv").read_text().splitlines()[1].split(",")
    assert row[4:] == ["", ""]


def test_summary_mentions_empty_buckets_and_ms():
    text = summary_text(two_conn_report())
    assert "bucket >100: no connections" in text
    assert "ms" in text


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9), st.integers(3, 40), st.integers(-50_000, 50_000))
def test_delay_shift_law(seed, n, d):
    c = flows_of(Trace(tuple(random_conversation(random.Random(seed), ("10.0.0.1", 1), ("10.0.0.2", 2),
                                                 T0, n, 2000).packets)))[0]
    jitter = random.Random(seed + 1)
    cap = Trace(tuple(replace(p, ts_us=p.ts_us + jitter.randint(-500, 500)) for p in replay_capture(c).packets))
    shifted = Trace(tuple(replace(p, ts_us=p.ts_us + d) for p in cap.packets))
    base = align(c, cap, SYNC).values()
    moved = align(c, shifted, SYNC).values()
    assert [m - b for m, b in zip(moved, base)] == [-d] * len(base)
    assert connection_stats(moved).stddev_us == pytest.approx(connection_stats(base).stddev_us, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 40))
def test_zero_self_deviation(seed, n):
    c = flows_of(Trace(tuple(random_conversation(random.Random(seed), ("10.0.0.1", 1), ("10.0.0.2", 2),
                                                 T0, n, 2000).packets)))[0]
    assert set(align(c, replay_capture(c), SYNC).values()) == {0}


# end to end through a simulated run


def run_sim(tmp_path, trace, delay=0, loss=0.0, seed=0, name="in"):
    path = tmp_path / f"{name}.pcap"
    write_pcap(trace, path)
    cfg = RunConfig(base_port=20000, seed=seed, inactivity_timeout_us=2_000_000,
                    link=LinkParams(one_way_delay_us=delay, loss_prob=loss, seed=seed))
    run = tmp_path / f"run-{name}"
    simulate(path, HostMapping({"10.0.0.1": "a", "10.0.0.2": "b"}), cfg, run)
    return run


def test_simulated_delay_shows_on_remote_direction(tmp_path):
    run = run_sim(tmp_path, Trace(tuple(request_response(n=4).packets)), delay=5000)
    report = analyze_run(run)
    fwd = {d.deviation_us for d in report.deviations if d.direction == "fwd"}
    rev = {d.deviation_us for d in report.deviations if d.direction == "rev"}
    assert fwd == {0} and rev == {-5000}
    assert (run / "summary.txt").exists()
    assert read_csv(run) == csv_rows(report)


def test_simulated_loss_gives_missing_entries(tmp_path):
    run = run_sim(tmp_path, Trace(tuple(request_response(n=6).packets)), loss=0.3, seed=5)
    report = analyze_run(run)
    assert report.missing_count > 0


def test_missing_capture_is_error(tmp_path):
    run = run_sim(tmp_path, Trace(tuple(request_response(n=1).packets)))
    (run / "captures" / "a.pcap").unlink()
    with pytest.raises(MissingInputError):
        analyze_run(run)


def test_unreadable_capture_warns(tmp_path):
    run = run_sim(tmp_path, Trace(tuple(request_response(n=1).packets)))
    (run / "captures" / "a.pcap").write_bytes(b"\xd4\xc3\xb2\xa1 garbage")
    report = analyze_run(run)
    assert report.warnings and report.missing_count == len(report.deviations)


def test_stats_are_numpy_consistent():
    rng = np.random.default_rng(0)
    v = rng.integers(-10**6, 10**6, 1001)
    s = connection_stats(v.tolist())
    assert s.median_us == int(np.median(v))
    assert s.stddev_us == pytest.approx(float(np.std(v)))
