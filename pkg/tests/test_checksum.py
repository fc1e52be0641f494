import dpkt
from hypothesis import given
from hypothesis import strategies as st

from conftest import ref_ones_complement, ref_packet_checksums_ok
from flowreplay.checksum import checksums_valid, fix_checksums, internet_checksum
from flowreplay.trace import PacketRecord, TcpFlags

F = TcpFlags


def test_all_zero_header():
    assert internet_checksum(bytes(20)) == 0xFFFF


def test_rfc1071_worked_example():
    data = bytes.fromhex("0001f203f4f5f6f7")
    assert ref_ones_complement(data) == 0x220D
    assert internet_checksum(data) == 0x220D
    assert ~internet_checksum(data) & 0xFFFF == 0xDDF2


@given(st.binary(max_size=2000))
def test_matches_reference_sum(data):
    assert internet_checksum(data) == ref_ones_complement(data)


def test_rewritten_packet_verifies_under_dissector():
    p = PacketRecord(0, "192.168.1.10", "10.0.0.1", 40000, 443, 123456, 654321, F.PSH | F.ACK, b"hello")
    p = fix_checksums(p)
    p = fix_checksums(PacketRecord(**{**p.__dict__, "src_ip": "172.16.0.9", "src_port": 20001}))
    ip = dpkt.ip.IP(p.ip_bytes())
    want_ip, want_tcp = ip.sum, ip.data.sum
    ip.sum = 0
    ip.data.sum = 0
    rebuilt = dpkt.ip.IP(bytes(ip))
    assert (rebuilt.sum, rebuilt.data.sum) == (want_ip, want_tcp)
    assert ref_packet_checksums_ok(p.ip_bytes())
    assert checksums_valid(p)


def test_stale_checksum_detected():
    p = fix_checksums(PacketRecord(0, "1.1.1.1", "2.2.2.2", 1, 2, 3, 4, F.ACK, b"x"))
    bad = PacketRecord(**{**p.__dict__, "seq": 4})
    assert not checksums_valid(bad)
    assert not ref_packet_checksums_ok(bad.ip_bytes())


@given(st.binary(max_size=100), st.integers(0, (1 << 32) - 1), st.sampled_from([b"", b"\x01\x01\x01\x00"]))
def test_fixed_packets_pass_reference(payload, seq, options):
    p = fix_checksums(PacketRecord(0, "10.1.2.3", "10.4.5.6", 20000, 20000, seq, 1, F.ACK, payload,
                                   tcp_options=options, ip_options=options))
    assert ref_packet_checksums_ok(p.ip_bytes())
