import struct

import pytest
from hypothesis import given, strategies as st

from blockoffload.errors import OutOfRangeError, ProtocolVersionError, TransportError
from blockoffload.transport import (
    LinkProfile,
    MsgType,
    NodeService,
    RemoteVolume,
    attach_remote,
    connect,
    decode_frame,
    encode_frame,
    frame_size,
    serve,
    traffic,
)
from blockoffload.volume import MemoryVolume, VolumeGeometry


def _service(blocks=64):
    vol = MemoryVolume(VolumeGeometry(4096, blocks), volume_id=5)
    return NodeService({5: vol}), vol


@given(st.integers(0, 255), st.binary(max_size=2000))
def test_frame_roundtrip(msg, payload):
    frame = encode_frame(msg, payload)
    assert len(frame) == frame_size(len(payload))
    assert decode_frame(frame) == (msg, payload)


def test_frame_layout_is_little_endian_length_then_type():
    frame = encode_frame(MsgType.IO_READ, b"abc")
    assert frame[:4] == struct.pack("<I", 4)
    assert frame[4] == MsgType.IO_READ


def test_truncated_frame_rejected():
    with pytest.raises(TransportError):
        decode_frame(encode_frame(1, b"abcd")[:-1])


def test_remote_volume_matches_local_semantics():
    svc, vol = _service()
    remote = attach_remote(svc, volume_id=5)
    assert remote.block_count == 64
    remote.write_blocks(10, b"x" * 8192)
    assert vol.read_blocks(10, 2) == b"x" * 8192
    assert remote.read_blocks(11, 1) == b"x" * 4096
    with pytest.raises(OutOfRangeError):
        remote.read_blocks(63, 2)


def test_link_meters_exact_framed_bytes():
    svc, _ = _service()
    profile = LinkProfile()
    remote = RemoteVolume(connect(svc, profile), 5)
    base_tx, base_rx = profile.tx_bytes, profile.rx_bytes
    with traffic("unit"):
        remote.write_blocks(0, bytes(4096))
        remote.read_blocks(0, 1)
    # write: header 5 + addr/count 12 + data; ack: 5. read: 5 + 12; reply 5 + data
    assert profile.tx_bytes - base_tx == (5 + 12 + 4096) + (5 + 12)
    assert profile.rx_bytes - base_rx == 5 + (5 + 4096)
    assert profile.category_tx("unit") == profile.tx_bytes - base_tx
    assert profile.category_round_trips("unit") == 2


def test_hello_errors():
    svc, _ = _service()
    with pytest.raises(TransportError):
        RemoteVolume(connect(svc), volume_id=99)
    with pytest.raises(ProtocolVersionError):
        RemoteVolume(connect(svc), volume_id=5, version=42)


def test_io_before_hello_is_an_error():
    svc, _ = _service()
    link = connect(svc)
    msg, _ = link.request(MsgType.IO_READ, struct.pack("<QI", 0, 1))
    assert msg == MsgType.ERROR


def test_socket_link_end_to_end():
    svc, vol = _service()
    server = serve(svc)
    try:
        host, port = server.server_address[:2]
        remote = attach_remote(f"{host}:{port}", volume_id=5)
        remote.write_blocks(3, b"s" * 4096)
        assert vol.read_blocks(3, 1) == b"s" * 4096
        assert remote.read_blocks(3, 1) == b"s" * 4096
        remote.close()
    finally:
        server.shutdown()
        server.server_close()


def test_latency_model_sleeps_round_trip():
    slept = []
    profile = LinkProfile(one_way_latency=50.0, bandwidth=1e6, sleep=slept.append)
    svc, _ = _service()
    RemoteVolume(connect(svc, profile), 5)
    nbytes = profile.tx_bytes + profile.rx_bytes
    assert slept == [pytest.approx(100e-6 + nbytes / 1e6)]
