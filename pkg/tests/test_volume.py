import pytest

from blockoffload.errors import GeometryError, MisalignedError, OutOfRangeError, SimulatedCrash
from blockoffload.volume import (
    CrashingVolume,
    FileVolume,
    MemoryVolume,
    RecordingVolume,
    VolumeGeometry,
    apply_writes,
    open_volume,
)


def test_geometry_rejects_odd_block_sizes():
    with pytest.raises(GeometryError):
        VolumeGeometry(1000, 10)
    with pytest.raises(GeometryError):
        VolumeGeometry(4096, 0)
    assert VolumeGeometry(512, 8).capacity == 4096


def test_memory_volume_roundtrip_and_zero_fill():
    vol = MemoryVolume(VolumeGeometry(512, 16))
    assert vol.read_blocks(3, 2) == bytes(1024)
    data = bytes(range(256)) * 4
    vol.write_blocks(3, data)
    assert vol.read_blocks(3, 2) == data
    assert vol.read_blocks(4, 1) == data[512:]
    assert vol.stats.blocks_written == 2 and vol.stats.write_calls == 1


def test_range_and_alignment_checks():
    vol = MemoryVolume(VolumeGeometry(512, 4))
    with pytest.raises(OutOfRangeError):
        vol.read_blocks(3, 2)
    with pytest.raises(OutOfRangeError):
        vol.write_blocks(4, bytes(512))
    with pytest.raises(MisalignedError):
        vol.write_blocks(0, b"abc")


def test_file_volume_persists_across_reopen(tmp_path):
    path = tmp_path / "vol.img"
    geo = VolumeGeometry(4096, 8)
    vol = FileVolume(path, geo)
    vol.write_blocks(7, b"z" * 4096)
    vol.close()
    again = open_volume(path)
    assert again.block_count == 8
    assert again.read_blocks(7, 1) == b"z" * 4096
    again.close()


def test_file_volume_rejects_wrong_size(tmp_path):
    path = tmp_path / "vol.img"
    path.write_bytes(b"x" * 5000)
    with pytest.raises(GeometryError):
        FileVolume(path, VolumeGeometry(4096, 2), create=False)


def test_crashing_volume_applies_last_write_then_fails():
    inner = MemoryVolume(VolumeGeometry(512, 8))
    vol = CrashingVolume(inner, crash_after=2)
    vol.write_blocks(0, b"a" * 512)
    with pytest.raises(SimulatedCrash):
        vol.write_blocks(1, b"b" * 512)
    assert inner.read_blocks(1, 1) == b"b" * 512
    with pytest.raises(SimulatedCrash):
        vol.read_blocks(0, 1)


def test_recording_volume_replays_to_same_state():
    inner = MemoryVolume(VolumeGeometry(512, 8))
    vol = RecordingVolume(inner)
    vol.write_blocks(0, b"a" * 1024)
    vol.write_blocks(1, b"c" * 512)
    blocks = {}
    apply_writes(blocks, vol.log, 512)
    assert blocks == inner.block_map()
    assert blocks[1] == b"c" * 512


def test_clone_is_independent():
    vol = MemoryVolume(VolumeGeometry(512, 4))
    vol.write_blocks(0, b"q" * 512)
    copy = vol.clone()
    copy.write_blocks(0, b"r" * 512)
    assert vol.read_blocks(0, 1) == b"q" * 512
