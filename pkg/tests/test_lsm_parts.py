import zlib

import pytest
from hypothesis import given, settings, strategies as st

from blockoffload.errors import CorruptionError, OutOfSpaceError
from blockoffload.extentfs import LeaseContext
from blockoffload.offloaddb.manifest import ManifestEdit, ManifestLog, SstMeta, scan_edits
from blockoffload.offloaddb.memtable import MemEntry, MemTable
from blockoffload.offloaddb.sstable import SstBuilder, SstReader, build_table, entry_size
from blockoffload.offloaddb.stubs import (
    KIND_SST,
    KIND_WAL,
    MergeArgs,
    MergeInput,
    MergeOutput,
    RecycleArgs,
    log_recycle_stub,
    merge_entries,
    merge_stub,
    unpack_props,
)
from blockoffload.offloaddb.wal import (
    OP_DELETE,
    OP_PUT,
    WalWriter,
    decode_record_at,
    encode_record,
    read_log,
    record_size,
    scan_records,
)

from conftest import make_fs

keys = st.binary(min_size=1, max_size=40)


def test_record_size_for_default_workload():
    assert record_size(24, 1024) == len(encode_record(1, 5, OP_PUT, b"k" * 24, b"v" * 1024)) == 1071


@given(st.lists(st.tuples(keys, st.binary(max_size=300), st.sampled_from([OP_PUT, OP_DELETE])), max_size=30),
       st.integers(1, 2**32))
def test_wal_scan_returns_what_was_encoded(recs, log_no):
    buf = b"".join(encode_record(log_no, i + 1, op, k, v) for i, (k, v, op) in enumerate(recs))
    out, end = scan_records(buf + bytes(100), log_no)
    assert end == len(buf)
    assert [(r.key, r.value, r.op) for r in out] == [(k, v, op) for k, v, op in recs]


def test_wal_crc_is_salted_by_log_number():
    rec = encode_record(7, 1, OP_PUT, b"k", b"v")
    assert decode_record_at(rec, 0, 7).key == b"k"
    with pytest.raises(CorruptionError):
        decode_record_at(rec, 0, 8)
    assert scan_records(rec, 8) == ([], 0)


def test_wal_torn_tail_stops_scan():
    a = encode_record(1, 1, OP_PUT, b"a", b"1")
    b = encode_record(1, 2, OP_PUT, b"b", b"2")
    out, end = scan_records(a + b[:-3], 1)
    assert [r.key for r in out] == [b"a"] and end == len(a)


@pytest.mark.parametrize("sync", ["lazy", "each"])
def test_wal_writer_durability_modes(sync):
    fs = make_fs(blocks=512)
    ino = fs.create_file("wal-000001")
    w = WalWriter(fs, ino, 1, sync=sync, chunk=8192)
    w.append(1, OP_PUT, b"k1", b"x" * 100)
    if sync == "each":
        assert w.durable_seq == 1
        assert [r.key for r in scan_records(read_log(fs, ino), 1)[0]] == [b"k1"]
    else:
        assert w.durable_seq == 0  # still in the partial tail block
    for i in range(2, 80):
        w.append(i, OP_PUT, b"k%d" % i, b"x" * 100)
    assert w.durable_seq > 1
    durable = w.durable_seq
    on_disk = scan_records(read_log(fs, ino), 1)[0]
    assert len(on_disk) >= durable
    w.close()
    assert fs.stat(ino).size == w.offset
    assert fs.allocated_bytes(ino) == -(-w.offset // 4096) * 4096
    assert len(scan_records(read_log(fs, ino), 1)[0]) == 79


def test_memtable_newest_wins_and_orders_keys():
    m = MemTable(3, budget=1 << 20)
    m.put(b"b", b"1", 1, 0)
    m.put(b"a", b"2", 2, 50)
    m.delete(b"b", 3, 100)
    m.add(MemEntry(b"a", b"old", 1, OP_PUT, 7))  # older seq ignored
    assert [e.key for e in m.entries()] == [b"a", b"b"]
    assert m.get(b"b").deleted and m.get(b"a").value == b"2"
    assert m.offset_array() == [50, 100]
    assert (m.min_seq, m.max_seq, m.smallest, m.largest) == (1, 3, b"a", b"b")
    m.freeze()
    with pytest.raises(RuntimeError):
        m.put(b"c", b"", 4, 0)


entries_st = st.dictionaries(keys, st.tuples(st.integers(1, 2**40), st.sampled_from([OP_PUT, OP_DELETE]),
                                              st.binary(max_size=500)), max_size=60)


@settings(deadline=None)
@given(entries_st, st.sampled_from([512, 4096]))
def test_sstable_roundtrip_and_point_lookup(d, chunk):
    items = [(k, s, op, v) for k, (s, op, v) in sorted(d.items())]
    buf = build_table(items, chunk)
    r = SstReader.from_bytes(buf)
    assert r.entries() == items
    for k, s, op, v in items:
        assert r.get(k) == (s, op, v)
    assert r.get(b"\xff" * 50) is None


def test_sstable_size_prediction_is_an_upper_bound():
    b = SstBuilder(4096)
    for i in range(200):
        predicted = b.size_if_added(5, 100)
        b.add(b"k%04d" % i, i, OP_PUT, b"v" * 100)
        assert predicted >= len(SstBuilder.finish(_copy(b)))
    assert len(b.finish()) == b.props.size
    assert entry_size(5, 100) > 105


def _copy(b):
    c = SstBuilder(b.chunk_bytes)
    c.__dict__.update({k: (bytearray(v) if isinstance(v, bytearray) else v) for k, v in b.__dict__.items()})
    return c


def test_sstable_corruption_detected():
    buf = bytearray(build_table([(b"a", 1, OP_PUT, b"v" * 100)]))
    buf[10] ^= 0xFF
    with pytest.raises(CorruptionError):
        SstReader.from_bytes(bytes(buf))


def _meta(i, level=0, wal=None):
    return SstMeta(i, level, b"a", b"z", 10, 1, 10, 4096, wal)


def test_manifest_torn_tail_is_ignored_but_inner_damage_raises():
    e1 = ManifestEdit(added=[_meta(1)], last_seq=10).encode()
    e2 = ManifestEdit(added=[_meta(2)], deleted=[1], last_seq=20).encode()
    edits, end = scan_edits(e1 + e2[:-2])
    assert len(edits) == 1 and end == len(e1)
    bad = bytearray(e1 + e2)
    bad[6] ^= 0x1
    with pytest.raises(CorruptionError):
        scan_edits(bytes(bad))


def test_manifest_log_replay_across_blocks():
    fs = make_fs(blocks=256)
    log = ManifestLog.create(fs)
    for i in range(1, 120):
        log.append(ManifestEdit(added=[_meta(i)], deleted=[i - 1] if i > 1 else [], last_seq=i, next_file=i + 1))
    _, state = ManifestLog.replay(fs)
    assert list(state.tables) == [119]
    assert state.last_seq == 119 and state.next_file == 120
    log2, _ = ManifestLog.replay(fs)
    log2.append(ManifestEdit(added=[_meta(500)]))
    _, state = ManifestLog.replay(fs)
    assert set(state.tables) == {119, 500}


def test_merge_entries_newest_version_and_tombstones():
    older = [(b"a", 1, OP_PUT, b"a1"), (b"b", 2, OP_PUT, b"b1"), (b"c", 3, OP_PUT, b"c1")]
    newer = [(b"a", 10, OP_PUT, b"a2"), (b"b", 11, OP_DELETE, b"")]
    kept = list(merge_entries([older, newer], drop_tombstones=False))
    assert kept == [(b"a", 10, OP_PUT, b"a2"), (b"b", 11, OP_DELETE, b""), (b"c", 3, OP_PUT, b"c1")]
    dropped = list(merge_entries([older, newer], drop_tombstones=True))
    assert [k for k, *_ in dropped] == [b"a", b"c"]


def _ctx(fs, reads, writes):
    return LeaseContext(fs.volume, fs.grant_lease(reads, writes))


def test_recycle_stub_builds_sorted_table_from_offsets():
    fs = make_fs(blocks=256)
    ino = fs.create_file("wal")
    w = WalWriter(fs, ino, 4)
    offs = {}
    for i, k in enumerate([b"d", b"b", b"a", b"c"]):
        offs[k] = w.append(i + 1, OP_PUT, k, k * 10)
    w.close()
    out = fs.create_file("sst")
    fs.preallocate(out, 4096)
    args = RecycleArgs(4, fs.file_extents(ino), fs.stat(ino).size, [offs[k] for k in sorted(offs)],
                       fs.file_extents(out))
    ctx = _ctx(fs, fs.file_extents(ino), fs.file_extents(out))
    (props,) = unpack_props(log_recycle_stub(ctx, args.encode()))
    fs.complete_lease(ctx.lease.lease_id, ctx.bytes_written)
    table = SstReader.from_bytes(fs.read(out, 0, fs.stat(out).size))
    assert [e[0] for e in table.entries()] == [b"a", b"b", b"c", b"d"]
    assert (props.entries, props.smallest, props.largest) == (4, b"a", b"d")


def test_merge_stub_splits_outputs_and_honours_reservations():
    fs = make_fs(blocks=512)
    items = [(b"k%04d" % i, i + 1, OP_PUT, b"v" * 200) for i in range(100)]
    src = fs.create_file("in")
    raw = build_table(items)
    fs.write(src, 0, raw)
    outs = []
    for j in range(3):
        o = fs.create_file(f"out{j}")
        fs.preallocate(o, 12 * 4096)
        outs.append(o)
    inputs = [MergeInput(KIND_SST, fs.file_extents(src), len(raw))]
    outputs = [MergeOutput(fs.file_extents(o), 12 * 4096) for o in outs]
    args = MergeArgs(inputs, outputs, target_bytes=8 * 4096)
    ctx = _ctx(fs, fs.file_extents(src), [e for o in outs for e in fs.file_extents(o)])
    props = unpack_props(merge_stub(ctx, args.encode()))
    assert [p.entries for p in props if p.entries][0] > 0
    assert sum(p.entries for p in props) == 100
    assert all(p.size <= 8 * 4096 for p in props)
    fs.complete_lease(ctx.lease.lease_id, ctx.bytes_written)
    merged = []
    for o in outs:
        if fs.stat(o).size:
            merged += SstReader.from_bytes(fs.read(o, 0, fs.stat(o).size)).entries()
    assert merged == items


def test_merge_stub_out_of_space():
    fs = make_fs(blocks=256)
    items = [(b"k%04d" % i, i + 1, OP_PUT, b"v" * 500) for i in range(40)]
    src = fs.create_file("in")
    raw = build_table(items)
    fs.write(src, 0, raw)
    o = fs.create_file("out")
    fs.preallocate(o, 2 * 4096)
    args = MergeArgs([MergeInput(KIND_SST, fs.file_extents(src), len(raw))],
                     [MergeOutput(fs.file_extents(o), 2 * 4096)])
    ctx = _ctx(fs, fs.file_extents(src), fs.file_extents(o))
    with pytest.raises(OutOfSpaceError):
        merge_stub(ctx, args.encode())


def test_merge_args_codec_roundtrip():
    fs = make_fs(blocks=64)
    a = fs.create_file("a")
    fs.write(a, 0, b"x" * 5000)
    ex = fs.file_extents(a)
    args = MergeArgs([MergeInput(KIND_WAL, ex, 5000, 9, [0, 40, 80]), MergeInput(KIND_SST, ex, 4000)],
                     [MergeOutput(ex, 8192)], True, 1024, 65536)
    assert MergeArgs.decode(args.encode()) == args
