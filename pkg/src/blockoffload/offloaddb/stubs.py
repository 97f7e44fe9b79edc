"""Task stubs shipped to an offload site, and their argument codecs.

Both stubs are plain functions of ``(ctx, args)`` so the same code runs on the
storage target, on a peer, or on the initiator as the local fallback; the
output bytes are identical wherever they run.
"""
from __future__ import annotations

import heapq
import struct
from array import array
from dataclasses import dataclass, field

from blockoffload.errors import OutOfSpaceError
from blockoffload.extentfs import FileExtent, LeaseContext
from blockoffload.offloaddb.sstable import SstBuilder, SstReader, TableProps
from blockoffload.offloaddb.wal import OP_DELETE, decode_record_at

LOG_RECYCLE = "log_recycle"
MERGE = "merge"
KIND_SST, KIND_WAL = 0, 1

_EXT = struct.Struct("<IQQI")


def _pack_extents(exts: list[FileExtent]) -> bytes:
    return struct.pack("<H", len(exts)) + b"".join(_EXT.pack(*e) for e in exts)


def _unpack_extents(buf, p: int) -> tuple[list[FileExtent], int]:
    (n,) = struct.unpack_from("<H", buf, p)
    p += 2
    out = []
    for _ in range(n):
        out.append(FileExtent(*_EXT.unpack_from(buf, p)))
        p += _EXT.size
    return out, p


def _pack_offsets(offsets) -> bytes:
    arr = array("I", offsets)
    if arr.itemsize != 4:
        raise RuntimeError("array('I') must be 32-bit")
    return struct.pack("<I", len(arr)) + arr.tobytes()


def _unpack_offsets(buf, p: int) -> tuple[list[int], int]:
    (n,) = struct.unpack_from("<I", buf, p)
    arr = array("I")
    arr.frombytes(bytes(buf[p + 4:p + 4 + 4 * n]))
    return arr.tolist(), p + 4 + 4 * n


def pack_props(props: list[TableProps]) -> bytes:
    parts = [struct.pack("<H", len(props))]
    for t in props:
        parts.append(struct.pack("<IQQQHH", t.entries, t.size if t.entries else 0, t.min_seq, t.max_seq,
                                 len(t.smallest), len(t.largest)) + t.smallest + t.largest)
    return b"".join(parts)


@dataclass(frozen=True)
class OutputProps:
    entries: int
    size: int
    min_seq: int
    max_seq: int
    smallest: bytes
    largest: bytes


def unpack_props(buf: bytes) -> list[OutputProps]:
    (n,) = struct.unpack_from("<H", buf)
    p = 2
    out = []
    head = struct.Struct("<IQQQHH")
    for _ in range(n):
        entries, size, lo, hi, ls, ll = head.unpack_from(buf, p)
        p += head.size
        smallest = bytes(buf[p:p + ls])
        largest = bytes(buf[p + ls:p + ls + ll])
        p += ls + ll
        out.append(OutputProps(entries, size, lo, hi, smallest, largest))
    return out


@dataclass
class RecycleArgs:
    log_no: int
    wal_extents: list[FileExtent]
    wal_len: int
    offsets: list[int]
    out_extents: list[FileExtent]
    chunk_bytes: int = 4096

    def encode(self) -> bytes:
        return (struct.pack("<QQI", self.log_no, self.wal_len, self.chunk_bytes)
                + _pack_extents(self.wal_extents) + _pack_offsets(self.offsets)
                + _pack_extents(self.out_extents))

    @classmethod
    def decode(cls, buf: bytes) -> "RecycleArgs":
        log_no, wal_len, chunk = struct.unpack_from("<QQI", buf)
        wal, p = _unpack_extents(buf, 20)
        offsets, p = _unpack_offsets(buf, p)
        out, p = _unpack_extents(buf, p)
        return cls(log_no, wal, wal_len, offsets, out, chunk)


def log_recycle_stub(ctx: LeaseContext, args: bytes) -> bytes:
    """Rebuild a sorted table from log records listed in key order by an offset array."""
    a = RecycleArgs.decode(args)
    builder = SstBuilder(a.chunk_bytes)
    if not a.offsets:
        return pack_props([builder.props])
    wal = ctx.read_file(a.wal_extents, 0, a.wal_len)
    for off in a.offsets:
        rec = decode_record_at(wal, off, a.log_no)
        builder.add(rec.key, rec.seq, rec.op, rec.value)
    ctx.write_file(a.out_extents, builder.finish())
    return pack_props([builder.props])


@dataclass
class MergeInput:
    kind: int
    extents: list[FileExtent]
    length: int
    log_no: int = 0
    offsets: list[int] = field(default_factory=list)


@dataclass
class MergeOutput:
    extents: list[FileExtent]
    reserve: int


@dataclass
class MergeArgs:
    inputs: list[MergeInput]
    outputs: list[MergeOutput]
    drop_tombstones: bool = False
    chunk_bytes: int = 4096
    target_bytes: int = 256 << 10

    def encode(self) -> bytes:
        parts = [struct.pack("<BIQH", self.drop_tombstones, self.chunk_bytes, self.target_bytes,
                             len(self.inputs))]
        for inp in self.inputs:
            parts.append(struct.pack("<BQQ", inp.kind, inp.length, inp.log_no) + _pack_extents(inp.extents))
            if inp.kind == KIND_WAL:
                parts.append(_pack_offsets(inp.offsets))
        parts.append(struct.pack("<H", len(self.outputs)))
        for out in self.outputs:
            parts.append(struct.pack("<Q", out.reserve) + _pack_extents(out.extents))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "MergeArgs":
        drop, chunk, target, n_in = struct.unpack_from("<BIQH", buf)
        p = struct.calcsize("<BIQH")
        inputs = []
        for _ in range(n_in):
            kind, length, log_no = struct.unpack_from("<BQQ", buf, p)
            exts, p = _unpack_extents(buf, p + 17)
            offsets = []
            if kind == KIND_WAL:
                offsets, p = _unpack_offsets(buf, p)
            inputs.append(MergeInput(kind, exts, length, log_no, offsets))
        (n_out,) = struct.unpack_from("<H", buf, p)
        p += 2
        outputs = []
        for _ in range(n_out):
            (reserve,) = struct.unpack_from("<Q", buf, p)
            exts, p = _unpack_extents(buf, p + 8)
            outputs.append(MergeOutput(exts, reserve))
        return cls(inputs, outputs, bool(drop), chunk, target)


def _input_entries(ctx: LeaseContext, inp: MergeInput) -> list[tuple[bytes, int, int, bytes]]:
    if not inp.length:
        return []
    buf = ctx.read_file(inp.extents, 0, inp.length)
    if inp.kind == KIND_SST:
        return SstReader.from_bytes(buf).entries()
    out = []
    for off in inp.offsets:
        rec = decode_record_at(buf, off, inp.log_no)
        out.append((rec.key, rec.seq, rec.op, rec.value))
    return out


def merge_entries(sources, drop_tombstones: bool):
    """k-way merge by (key asc, seq desc), newest version per key wins."""
    last = None
    for key, seq, op, value in heapq.merge(*sources, key=lambda e: (e[0], -e[1])):
        if key == last:
            continue
        last = key
        if drop_tombstones and op == OP_DELETE:
            continue
        yield key, seq, op, value


def merge_stub(ctx: LeaseContext, args: bytes) -> bytes:
    """Merge input tables into outputs no larger than their reservations or the target size."""
    a = MergeArgs.decode(args)
    sources = [_input_entries(ctx, inp) for inp in a.inputs]
    props: list[TableProps] = []
    outputs = iter(a.outputs)
    cur = None
    builder = None

    def finish():
        ctx.write_file(cur.extents, builder.finish())
        props.append(builder.props)

    for key, seq, op, value in merge_entries(sources, a.drop_tombstones):
        if builder is not None and builder.entries and (
                builder.size_if_added(len(key), len(value)) > min(cur.reserve, a.target_bytes)):
            finish()
            builder = None
        if builder is None:
            cur = next(outputs, None)
            if cur is None:
                raise OutOfSpaceError("merge output exceeds the reserved output files")
            builder = SstBuilder(a.chunk_bytes)
        if builder.size_if_added(len(key), len(value)) > cur.reserve:
            raise OutOfSpaceError("entry does not fit in a reserved output file")
        builder.add(key, seq, op, value)
    if builder is not None and builder.entries:
        finish()
    while len(props) < len(a.outputs):
        props.append(SstBuilder(a.chunk_bytes).props)
    return pack_props(props)
