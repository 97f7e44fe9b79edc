import random

import pytest
from hypothesis import given, settings, strategies as st

from blockoffload.errors import (
    AuthorizationError,
    DuplicateNameError,
    FsError,
    LeaseConflictError,
    LeaseError,
    NotFoundError,
    StaleLeaseError,
)
from blockoffload.extentfs import ExtentFS, FileExtent, LeaseContext
from blockoffload.volume import MemoryVolume, RecordingVolume, VolumeGeometry, apply_writes

from conftest import make_fs


def test_create_write_read(fs):
    ino = fs.create_file("a")
    fs.write(ino, 0, b"hello")
    fs.write(ino, 5000, b"world")
    assert fs.stat(ino).size == 5005
    assert fs.read(ino, 0, 5) == b"hello"
    assert fs.read(ino, 5, 10) == bytes(10)
    assert fs.read(ino, 5000, 5) == b"world"
    with pytest.raises(FsError):
        fs.read(ino, 5000, 6)


def test_names_and_inode_reuse(fs):
    a = fs.create_file("a")
    b = fs.create_file("b")
    with pytest.raises(DuplicateNameError):
        fs.create_file("a")
    assert fs.lookup("b") == b and fs.name_of(a) == "a"
    fs.delete_file(a)
    assert not fs.exists("a")
    with pytest.raises(NotFoundError):
        fs.lookup("a")
    assert fs.create_file("c") == a  # lowest free ino


def test_overwrite_preserves_neighbouring_bytes(fs):
    ino = fs.create_file("f")
    fs.write(ino, 0, b"a" * 10000)
    fs.write(ino, 4090, b"XYZXYZXYZXYZ")
    data = fs.read(ino, 0, 10000)
    assert data[4090:4102] == b"XYZXYZXYZXYZ"
    assert data[:4090] == b"a" * 4090 and data[4102:] == b"a" * (10000 - 4102)


def test_mtime_is_monotonic(fs):
    ino = fs.create_file("f")
    m0 = fs.stat(ino).mtime
    fs.write(ino, 0, b"x")
    m1 = fs.stat(ino).mtime
    fs.write(ino, 0, b"y")
    assert m0 < m1 < fs.stat(ino).mtime


def test_remount_replays_journal_and_checkpoint():
    vol = MemoryVolume(VolumeGeometry(4096, 2048))
    fs = ExtentFS.mkfs(vol)
    a = fs.create_file("a")
    fs.write(a, 0, b"1" * 9000)
    fs.sync()
    b = fs.create_file("b")
    fs.write(b, 0, b"2" * 100)
    fs.release_tail(a, 4096)
    again = ExtentFS.mount(vol)
    assert again.list_files() == {"a": a, "b": b}
    assert again.read(a, 0, 4096) == b"1" * 4096
    assert again.read(b, 0, 100) == b"2" * 100
    assert again.stat(a).mtime > 0
    again.check()
    # a later mount never reuses mtimes issued before it
    assert again.stat(b).mtime < again._tick()


def test_preallocate_write_reserved_set_size(fs):
    ino = fs.create_file("log")
    fs.preallocate(ino, 5 * 4096)
    assert fs.stat(ino).size == 0 and fs.allocated_bytes(ino) == 5 * 4096
    fs.write_reserved(ino, 4096, b"r" * 5000)
    fs.set_size(ino, 9096)
    assert fs.read(ino, 4096, 5000) == b"r" * 5000
    with pytest.raises(FsError):
        fs.write_reserved(ino, 100, b"x")
    with pytest.raises(FsError):
        fs.write_reserved(ino, 5 * 4096, b"x")


def test_release_tail_frees_exact_reserved_minus_used(fs):
    ino = fs.create_file("f")
    fs.preallocate(ino, 10 * 4096)
    fs.write(ino, 0, b"d" * 9000)  # 3 blocks used
    free0 = fs.space.free
    assert fs.release_tail(ino, 9000) == 7
    assert fs.space.free == free0 + 7
    fs.check()


def _file(fs, name, nbytes):
    ino = fs.create_file(name)
    fs.write(ino, 0, bytes([len(name)]) * nbytes)
    return ino


def test_lease_conflict_rules(fs):
    a = _file(fs, "a", 8192)
    b = _file(fs, "b", 8192)
    ra, rb = fs.file_extents(a), fs.file_extents(b)
    l1 = fs.grant_lease(read_extents=ra)
    fs.grant_lease(read_extents=ra)  # shared reads are fine
    with pytest.raises(LeaseConflictError):
        fs.grant_lease(write_extents=ra)
    w = fs.grant_lease(write_extents=rb)
    with pytest.raises(LeaseConflictError):
        fs.grant_lease(read_extents=rb)
    fs.complete_lease(w.lease_id, [8192])
    fs.grant_lease(read_extents=rb)
    fs.complete_lease(l1.lease_id)
    assert len(fs.active_leases()) == 2


def test_lease_blocks_initiator_writes_to_leased_blocks(fs):
    a = _file(fs, "a", 8192)
    lease = fs.grant_lease(write_extents=fs.file_extents(a))
    with pytest.raises(LeaseConflictError):
        fs.write(a, 0, b"no")
    fs.abort_lease(lease.lease_id)
    fs.write(a, 0, b"ok")


def test_lease_rejects_extents_not_owned(fs):
    a = _file(fs, "a", 8192)
    (ext,) = fs.file_extents(a)
    with pytest.raises(LeaseError):
        fs.grant_lease(read_extents=[ext._replace(phys_start=ext.phys_start + 1)])
    with pytest.raises(LeaseError):
        fs.grant_lease(read_extents=[ext._replace(length=ext.length + 1)])


def test_lease_context_authorizes_only_leased_blocks(fs):
    a = _file(fs, "a", 3 * 4096)
    b = _file(fs, "b", 4096)
    out = fs.create_file("out")
    fs.preallocate(out, 2 * 4096)
    lease = fs.grant_lease(fs.file_extents(a), fs.file_extents(out))
    ctx = LeaseContext(fs.volume, lease)
    (ra,), (wo,) = lease.read_set, lease.write_set
    assert ctx.offload_read(ra.phys_start, 3) == bytes([1]) * (3 * 4096)
    assert ctx.offload_read(wo.phys_start, 1) is not None  # write set is readable
    (rb,) = fs.file_extents(b)
    with pytest.raises(AuthorizationError):
        ctx.offload_read(rb.phys_start, 1)
    with pytest.raises(AuthorizationError):
        ctx.offload_write(ra.phys_start, bytes(4096))
    ctx.offload_write(wo.phys_start, b"w" * 4096, valid=100)
    assert ctx.bytes_written == [100]
    ctx.close()
    with pytest.raises(StaleLeaseError):
        ctx.offload_read(ra.phys_start, 1)
    freed = fs.complete_lease(lease.lease_id, ctx.bytes_written)
    assert fs.stat(out).size == 100
    assert freed == [(wo.phys_start + 1, 1)]
    assert fs.read(out, 0, 100) == b"w" * 100
    fs.check()


def test_read_file_and_write_file_over_split_extents(fs):
    # interleave two files so one gets a fragmented allocation
    a, b = fs.create_file("a"), fs.create_file("b")
    for i in range(4):
        fs.write(a, i * 4096, b"A" * 4096)
        fs.write(b, i * 4096, b"B" * 4096)
    exts = fs.file_extents(a)
    assert len(exts) > 1
    lease = fs.grant_lease(read_extents=exts)
    ctx = LeaseContext(fs.volume, lease)
    assert ctx.read_file(exts, 4000, 5000) == b"A" * 5000
    fs.complete_lease(lease.lease_id)


def test_abort_lease_reclaims_reserved_blocks(fs):
    out = fs.create_file("out")
    fs.preallocate(out, 4 * 4096)
    free0 = fs.space.free
    lease = fs.grant_lease(write_extents=fs.file_extents(out))
    freed = fs.abort_lease(lease.lease_id)
    assert sum(n for _, n in freed) == 4
    assert fs.space.free == free0 + 4
    fs.check()


def test_fs_metadata_survives_every_crash_point():
    base = MemoryVolume(VolumeGeometry(4096, 512))
    ExtentFS.mkfs(base)
    start = base.block_map()
    rec = RecordingVolume(base.clone())
    fs = ExtentFS.mount(rec)
    rng = random.Random(3)
    inos = []
    for step in range(40):
        if inos and rng.random() < 0.2:
            fs.delete_file(inos.pop(rng.randrange(len(inos))))
        elif inos and rng.random() < 0.3:
            fs.release_tail(inos[-1], rng.randint(0, fs.allocated_bytes(inos[-1])))
        else:
            ino = fs.create_file(f"f{step}")
            fs.write(ino, 0, rng.randbytes(rng.randint(1, 20000)))
            inos.append(ino)
        if step % 13 == 0:
            fs.sync()
    writes = rec.log
    for k in range(0, len(writes) + 1):
        blocks = dict(start)
        apply_writes(blocks, writes[:k], 4096)
        vol = MemoryVolume(VolumeGeometry(4096, 512), blocks=blocks)
        ExtentFS.mount(vol).check()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["write", "prealloc", "trim", "delete", "lease"]),
                          st.integers(0, 5), st.integers(0, 30000)), max_size=40))
def test_space_accounting_matches_model(ops):
    fs = make_fs(blocks=1024)
    model: dict[str, bytearray] = {}
    for op, slot, n in ops:
        name = f"f{slot}"
        if op == "write":
            ino = fs.lookup(name) if name in model else fs.create_file(name)
            data = bytes([slot + 1]) * (n % 6000 + 1)
            off = n // 10
            fs.write(ino, off, data)
            buf = model.setdefault(name, bytearray())
            if len(buf) < off + len(data):
                buf.extend(bytes(off + len(data) - len(buf)))
            buf[off:off + len(data)] = data
        elif name not in model:
            continue
        elif op == "prealloc":
            fs.preallocate(fs.lookup(name), n)
        elif op == "trim":
            ino = fs.lookup(name)
            keep = min(n, fs.allocated_bytes(ino))
            fs.release_tail(ino, keep)
            del model[name][-(-keep // 4096) * 4096:]  # whole blocks are kept
        elif op == "delete":
            fs.delete_file(fs.lookup(name))
            del model[name]
        else:
            ino = fs.lookup(name)
            fs.preallocate(ino, 3 * 4096)
            size = fs.stat(ino).size
            tail = fs.file_extents(ino, -(-size // 4096) * 4096)
            lease = fs.grant_lease(write_extents=tail)
            ctx = LeaseContext(fs.volume, lease)
            used = n % (3 * 4096)
            if used and tail:
                ctx.write_file(tail, bytes([99]) * used)
            fs.complete_lease(lease.lease_id, [min(max(used - (e.logical_offset - tail[0].logical_offset), 0),
                                                   e.length * 4096) for e in tail])
            buf = model[name]
            pad = -(-len(buf) // 4096) * 4096
            if used:
                buf.extend(bytes(pad - len(buf)))
                buf.extend(bytes([99]) * used)
        fs.check()
        assert fs.space.allocated == fs.layout.data_start + fs.live_blocks()
    for name, buf in model.items():
        ino = fs.lookup(name)
        assert fs.stat(ino).size == len(buf)
        assert fs.read(ino, 0, len(buf)) == bytes(buf)
