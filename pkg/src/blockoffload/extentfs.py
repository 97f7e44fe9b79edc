"""Initiator-centric extent file system.

Only the mounting initiator mutates metadata: the inode table, per-file extent
lists and the free-space map. Offloaded tasks never see that metadata; they get
a :class:`Lease` naming the physical extents they may read and write, and do
their I/O through a :class:`LeaseContext` that refuses anything else. While a
lease is active the initiator itself may not touch the lease's write set.

On-volume layout::

    block 0                  superblock
    [journal_start, +J)      metadata journal, append records
    slot A, slot B           checkpoints: 128 B inode records | bitmap | spill
    data region              file blocks

Each mutating call appends one journal record ``[u32 len][u8 op][payload][u32 crc32]``
(the crc is salted with the journal epoch so records from an older epoch are
never replayed). When the journal fills, the full state is written to the
inactive slot and the superblock is flipped to it in a single block write.
"""
from __future__ import annotations

import bisect
import itertools
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from blockoffload.errors import (
    AuthorizationError,
    CorruptMetadataError,
    DuplicateNameError,
    FsError,
    LeaseConflictError,
    LeaseError,
    NotFoundError,
    OutOfSpaceError,
    StaleLeaseError,
    TableFullError,
    VolumeTooSmallError,
)
from blockoffload.transport import traffic
from blockoffload.volume import Volume

MAGIC = b"OFFS"
FS_VERSION = 1
MIN_BLOCKS = 64
INODE_RECORD = 128
MAX_NAME = 255
# Added to the mtime counter on every mount so versions handed out before a
# crash (and possibly cached on a target) are never reissued.
MOUNT_MTIME_BUMP = 1 << 20

_SB = struct.Struct("<4sHIQIQIQQIIIBQIIQ")
_INODE = struct.Struct("<IBBHQQIII")
_REC_HDR = struct.Struct("<IB")
_EXT = struct.Struct("<QI")

OP_CREATE, OP_DELETE, OP_ALLOC, OP_SETSIZE, OP_TRIM = 1, 2, 3, 4, 5


class Extent(NamedTuple):
    """A run of ``length`` physical blocks mapped at byte ``logical_offset`` of a file."""

    logical_offset: int
    phys_start: int
    length: int


class FileExtent(NamedTuple):
    """An extent tagged with its owning inode; the unit of a lease."""

    ino: int
    logical_offset: int
    phys_start: int
    length: int


class Stat(NamedTuple):
    size: int
    mtime: int


@dataclass
class Inode:
    ino: int
    name: str
    size: int = 0
    mtime: int = 0
    extents: list[Extent] = field(default_factory=list)

    @property
    def nblocks(self) -> int:
        return sum(e.length for e in self.extents)

    def phys_runs(self, lblock: int, count: int, block_size: int) -> list[tuple[int, int, int]]:
        """Map logical blocks ``[lblock, lblock+count)`` to ``(lblock, phys, n)`` runs."""
        runs = []
        want_end = lblock + count
        for ext in self.extents:
            e0 = ext.logical_offset // block_size
            e1 = e0 + ext.length
            if e1 <= lblock:
                continue
            if e0 >= want_end:
                break
            s = max(lblock, e0)
            t = min(want_end, e1)
            runs.append((s, ext.phys_start + (s - e0), t - s))
        if sum(r[2] for r in runs) != count:
            raise FsError(f"inode {self.ino}: logical blocks [{lblock}, {want_end}) not mapped")
        return runs

    def append_run(self, phys: int, n: int, block_size: int) -> None:
        if self.extents:
            last = self.extents[-1]
            if last.phys_start + last.length == phys:
                self.extents[-1] = last._replace(length=last.length + n)
                return
        self.extents.append(Extent(self.nblocks * block_size, phys, n))

    def trim(self, keep_blocks: int) -> list[tuple[int, int]]:
        """Drop blocks beyond ``keep_blocks``; return the freed ``(phys, n)`` runs."""
        freed = []
        kept = []
        seen = 0
        for ext in self.extents:
            if seen + ext.length <= keep_blocks:
                kept.append(ext)
            elif seen >= keep_blocks:
                freed.append((ext.phys_start, ext.length))
            else:
                k = keep_blocks - seen
                kept.append(ext._replace(length=k))
                freed.append((ext.phys_start + k, ext.length - k))
            seen += ext.length
        self.extents = kept
        return freed


class FreeSpaceMap:
    """One byte per block (0 free, 1 allocated); runs are found with ``bytes.find``."""

    def __init__(self, block_count: int, reserved: int):
        self.block_count = block_count
        self.reserved = reserved
        self._map = bytearray(block_count)
        self._map[:reserved] = b"\x01" * reserved
        self.free = block_count - reserved

    @property
    def allocated(self) -> int:
        return self.block_count - self.free

    def is_allocated(self, block: int) -> bool:
        return bool(self._map[block])

    def mark(self, phys: int, n: int) -> None:
        seg = self._map[phys:phys + n]
        if seg.count(1):
            raise CorruptMetadataError(f"blocks [{phys}, {phys + n}) already allocated")
        self._map[phys:phys + n] = b"\x01" * n
        self.free -= n

    def release(self, phys: int, n: int) -> None:
        seg = self._map[phys:phys + n]
        if seg.count(0):
            raise CorruptMetadataError(f"blocks [{phys}, {phys + n}) already free")
        self._map[phys:phys + n] = bytes(n)
        self.free += n

    def allocate(self, n: int, hint: int = 0) -> list[tuple[int, int]]:
        """Reserve ``n`` blocks, contiguous after ``hint`` if possible."""
        if n <= 0:
            return []
        if n > self.free:
            raise OutOfSpaceError(f"need {n} blocks, {self.free} free")
        hint = max(hint, self.reserved)
        want = bytes(n)
        at = self._map.find(want, hint)
        if at < 0:
            at = self._map.find(want, self.reserved)
        if at >= 0:
            self.mark(at, n)
            return [(at, n)]
        runs = []
        need = n
        pos = self.reserved
        while need:
            start = self._map.find(0, pos)
            end = self._map.find(1, start)
            if end < 0:
                end = self.block_count
            take = min(need, end - start)
            runs.append((start, take))
            need -= take
            pos = start + take
        for phys, k in runs:
            self.mark(phys, k)
        return runs

    def to_bitmap(self) -> bytes:
        bits = bytearray((self.block_count + 7) // 8)
        m = self._map
        for i in range(self.block_count):
            if m[i]:
                bits[i >> 3] |= 1 << (i & 7)
        return bytes(bits)


@dataclass(frozen=True)
class Layout:
    block_size: int
    block_count: int
    max_inodes: int
    journal_start: int
    journal_blocks: int
    slot_starts: tuple[int, int]
    inode_blocks: int
    bitmap_blocks: int
    spill_blocks: int

    @property
    def slot_blocks(self) -> int:
        return self.inode_blocks + self.bitmap_blocks + self.spill_blocks

    @property
    def data_start(self) -> int:
        return self.slot_starts[1] + self.slot_blocks

    @classmethod
    def for_volume(cls, block_size: int, block_count: int) -> "Layout":
        max_inodes = max(16, min(8192, block_count // 16))
        inode_blocks = -(-max_inodes * INODE_RECORD // block_size)
        bitmap_blocks = -(-block_count // (8 * block_size))
        spill_blocks = max(1, inode_blocks)
        journal_blocks = max(2, min(256, block_count // 512))
        slot = inode_blocks + bitmap_blocks + spill_blocks
        journal_start = 1
        a = journal_start + journal_blocks
        return cls(block_size, block_count, max_inodes, journal_start, journal_blocks,
                   (a, a + slot), inode_blocks, bitmap_blocks, spill_blocks)


@dataclass
class Lease:
    lease_id: int
    read_set: list[FileExtent]
    write_set: list[FileExtent]
    mtime_hints: list[tuple[int, int]]
    state: str = "active"
    initiator_id: int = 0
    volume_id: int = 0

    def hint_for(self, ino: int) -> int:
        for i, m in self.mtime_hints:
            if i == ino:
                return m
        return 0


def _blocks_of(extents: Iterable[FileExtent]) -> Iterable[int]:
    for ext in extents:
        yield from range(ext.phys_start, ext.phys_start + ext.length)


class ExtentFS:
    """A mounted file system. Construct with :meth:`mkfs` or :meth:`mount`."""

    def __init__(self, volume: Volume, layout: Layout, epoch: int, active_slot: int):
        self.volume = volume
        self.layout = layout
        self.block_size = layout.block_size
        self._epoch = epoch
        self._active_slot = active_slot
        self._lock = threading.RLock()
        self._inodes: dict[int, Inode] = {}
        self._names: dict[str, int] = {}
        self.space = FreeSpaceMap(layout.block_count, layout.data_start)
        self._journal = bytearray(layout.journal_blocks * layout.block_size)
        self._jpos = 0
        self._mtime = 0
        self._leases: dict[int, Lease] = {}
        self._lease_ids = itertools.count(1)
        self._write_leased: dict[int, int] = {}
        self._read_leased: dict[int, int] = {}
        self.checkpoints = 0
        self.journal_records = 0

    # -- construction ---------------------------------------------------------

    @classmethod
    def mkfs(cls, volume: Volume, force: bool = True) -> "ExtentFS":
        if volume.block_count < MIN_BLOCKS:
            raise VolumeTooSmallError(f"need >= {MIN_BLOCKS} blocks, volume has {volume.block_count}")
        if not force and volume.read_blocks(0, 1)[:4] == MAGIC:
            raise FsError("volume already holds a file system")
        layout = Layout.for_volume(volume.block_size, volume.block_count)
        fs = cls(volume, layout, epoch=1, active_slot=0)
        fs._mtime = 1
        fs.volume.write_blocks(layout.journal_start, bytes(layout.journal_blocks * layout.block_size))
        fs._write_checkpoint(slot=0, epoch=1)
        return fs

    @classmethod
    def mount(cls, volume: Volume) -> "ExtentFS":
        sb = volume.read_blocks(0, 1)
        fields = _SB.unpack_from(sb)
        (magic, version, block_size, block_count, max_inodes, journal_start, journal_blocks,
         slot_a, slot_b, inode_blocks, bitmap_blocks, spill_blocks, active, epoch, spill_len,
         slot_crc, mtime_base) = fields
        (sb_crc,) = struct.unpack_from("<I", sb, _SB.size)
        if magic != MAGIC or zlib.crc32(sb[:_SB.size]) != sb_crc:
            raise CorruptMetadataError("no valid superblock")
        if version != FS_VERSION:
            raise CorruptMetadataError(f"unsupported fs version {version}")
        if block_size != volume.block_size or block_count != volume.block_count:
            raise CorruptMetadataError("superblock geometry does not match volume")
        layout = Layout(block_size, block_count, max_inodes, journal_start, journal_blocks,
                        (slot_a, slot_b), inode_blocks, bitmap_blocks, spill_blocks)
        fs = cls(volume, layout, epoch, active)
        fs._load_checkpoint(active, spill_len, slot_crc)
        fs._mtime = max(fs._mtime, mtime_base)
        fs._replay_journal()
        fs._rebuild_space()
        fs._mtime += MOUNT_MTIME_BUMP
        return fs

    # -- checkpoint and journal ----------------------------------------------

    def _write_checkpoint(self, slot: int, epoch: int) -> None:
        lay = self.layout
        table = bytearray(lay.inode_blocks * lay.block_size)
        spill = bytearray()
        for ino, inode in sorted(self._inodes.items()):
            name = inode.name.encode()
            off = len(spill)
            spill += name
            for ext in inode.extents:
                spill += _EXT.pack(ext.phys_start, ext.length)
            rec = _INODE.pack(ino, 1, len(name), 0, inode.size, inode.mtime,
                              len(inode.extents), off, len(spill) - off)
            table[(ino - 1) * INODE_RECORD:(ino - 1) * INODE_RECORD + len(rec)] = rec
        if len(spill) > lay.spill_blocks * lay.block_size:
            raise TableFullError("metadata spill area exhausted")
        bitmap = self.space.to_bitmap()
        body = bytes(table) + bitmap.ljust(lay.bitmap_blocks * lay.block_size, b"\0") + bytes(spill)
        slot_crc = zlib.crc32(body)
        pad = (-len(body)) % lay.block_size
        self.volume.write_blocks(lay.slot_starts[slot], body + bytes(pad))
        self._write_superblock(slot, epoch, len(spill), slot_crc)
        self._active_slot = slot
        self._epoch = epoch
        self._journal = bytearray(len(self._journal))
        self._jpos = 0
        self.checkpoints += 1

    def _write_superblock(self, slot: int, epoch: int, spill_len: int, slot_crc: int) -> None:
        lay = self.layout
        sb = _SB.pack(MAGIC, FS_VERSION, lay.block_size, lay.block_count, lay.max_inodes,
                      lay.journal_start, lay.journal_blocks, lay.slot_starts[0], lay.slot_starts[1],
                      lay.inode_blocks, lay.bitmap_blocks, lay.spill_blocks, slot, epoch,
                      spill_len, slot_crc, self._mtime)
        sb += struct.pack("<I", zlib.crc32(sb))
        self.volume.write_blocks(0, sb.ljust(lay.block_size, b"\0"))

    def _load_checkpoint(self, slot: int, spill_len: int, slot_crc: int) -> None:
        lay = self.layout
        raw = self.volume.read_blocks(lay.slot_starts[slot], lay.slot_blocks)
        fixed = (lay.inode_blocks + lay.bitmap_blocks) * lay.block_size
        body = raw[:fixed + spill_len]
        if zlib.crc32(body) != slot_crc:
            raise CorruptMetadataError("checkpoint slot checksum mismatch")
        spill = body[fixed:]
        for i in range(lay.max_inodes):
            ino, live, nlen, _, size, mtime, next_, soff, _slen = _INODE.unpack_from(raw, i * INODE_RECORD)
            if not live:
                continue
            name = spill[soff:soff + nlen].decode()
            inode = Inode(ino, name, size, mtime)
            p = soff + nlen
            for _ in range(next_):
                phys, n = _EXT.unpack_from(spill, p)
                p += _EXT.size
                inode.append_run(phys, n, lay.block_size)
            self._inodes[ino] = inode
            self._names[name] = ino
            self._mtime = max(self._mtime, mtime)

    def _crc(self, op: int, payload: bytes) -> int:
        return zlib.crc32(bytes([op]) + payload, self._epoch & 0xFFFFFFFF)

    def _log(self, op: int, payload: bytes) -> None:
        rec = _REC_HDR.pack(len(payload), op) + payload + struct.pack("<I", self._crc(op, payload))
        if self._jpos + len(rec) > len(self._journal):
            with traffic("fsmeta"):
                self._write_checkpoint(1 - self._active_slot, self._epoch + 1)
            rec = _REC_HDR.pack(len(payload), op) + payload + struct.pack("<I", self._crc(op, payload))
            if len(rec) > len(self._journal):
                raise FsError("journal record larger than the journal")
        bs = self.block_size
        start, end = self._jpos, self._jpos + len(rec)
        self._journal[start:end] = rec
        b0, b1 = start // bs, -(-end // bs)
        with traffic("fsmeta"):
            self.volume.write_blocks(self.layout.journal_start + b0, bytes(self._journal[b0 * bs:b1 * bs]))
        self._jpos = end
        self.journal_records += 1

    def _replay_journal(self) -> None:
        lay = self.layout
        raw = self.volume.read_blocks(lay.journal_start, lay.journal_blocks)
        pos = 0
        while pos + _REC_HDR.size + 4 <= len(raw):
            length, op = _REC_HDR.unpack_from(raw, pos)
            end = pos + _REC_HDR.size + length + 4
            if length == 0 or end > len(raw):
                break
            payload = raw[pos + _REC_HDR.size:end - 4]
            (crc,) = struct.unpack_from("<I", raw, end - 4)
            if crc != self._crc(op, payload):
                break
            self._apply(op, payload)
            pos = end
        self._journal[:pos] = raw[:pos]
        self._jpos = pos

    def _apply(self, op: int, p: bytes) -> None:
        bs = self.block_size
        if op == OP_CREATE:
            ino, mtime = struct.unpack_from("<IQ", p)
            name = p[12:].decode()
            self._inodes[ino] = Inode(ino, name, 0, mtime)
            self._names[name] = ino
        elif op == OP_DELETE:
            (ino,) = struct.unpack_from("<I", p)
            inode = self._inodes.pop(ino)
            del self._names[inode.name]
        elif op == OP_ALLOC:
            ino, mtime, n = struct.unpack_from("<IQI", p)
            inode = self._inodes[ino]
            for i in range(n):
                phys, k = _EXT.unpack_from(p, 16 + i * _EXT.size)
                inode.append_run(phys, k, bs)
            inode.mtime = mtime
        elif op == OP_SETSIZE:
            ino, size, mtime = struct.unpack_from("<IQQ", p)
            self._inodes[ino].size = size
            self._inodes[ino].mtime = mtime
        elif op == OP_TRIM:
            ino, keep, mtime = struct.unpack_from("<IQQ", p)
            inode = self._inodes[ino]
            inode.trim(keep)
            inode.size = min(inode.size, keep * bs)
            inode.mtime = mtime
        else:
            raise CorruptMetadataError(f"unknown journal op {op}")
        if op != OP_DELETE:
            self._mtime = max(self._mtime, struct.unpack_from("<Q", p, 4)[0])

    def _rebuild_space(self) -> None:
        self.space = FreeSpaceMap(self.layout.block_count, self.layout.data_start)
        for inode in self._inodes.values():
            for ext in inode.extents:
                self.space.mark(ext.phys_start, ext.length)

    def sync(self) -> None:
        """Fold the journal into a fresh checkpoint."""
        with self._lock:
            self._write_checkpoint(1 - self._active_slot, self._epoch + 1)

    # -- helpers ----------------------------------------------------------------

    def _tick(self) -> int:
        self._mtime += 1
        return self._mtime

    def _inode(self, ino: int) -> Inode:
        try:
            return self._inodes[ino]
        except KeyError:
            raise NotFoundError(f"no live inode {ino}") from None

    def _check_initiator_access(self, inode: Inode, lblock: int, count: int, *,
                                include_reads: bool = False) -> None:
        if not count or not (self._write_leased or (include_reads and self._read_leased)):
            return
        for _, phys, n in inode.phys_runs(lblock, count, self.block_size):
            for b in range(phys, phys + n):
                if b in self._write_leased:
                    raise LeaseConflictError(
                        f"block {b} of inode {inode.ino} is in the write set of lease {self._write_leased[b]}")
                if include_reads and b in self._read_leased:
                    raise LeaseConflictError(f"block {b} of inode {inode.ino} is in an active read set")

    def _allocate_for(self, inode: Inode, nblocks: int, mtime: int) -> list[Extent]:
        hint = inode.extents[-1].phys_start + inode.extents[-1].length if inode.extents else 0
        runs = self.space.allocate(nblocks, hint)
        before = len(inode.extents)
        first_new = inode.nblocks
        for phys, n in runs:
            inode.append_run(phys, n, self.block_size)
        inode.mtime = mtime
        payload = struct.pack("<IQI", inode.ino, mtime, len(runs)) + b"".join(
            _EXT.pack(phys, n) for phys, n in runs)
        self._log(OP_ALLOC, payload)
        bs = self.block_size
        out = []
        for phys, n in runs:
            out.append(Extent(first_new * bs, phys, n))
            first_new += n
        del before
        return out

    # -- file operations ----------------------------------------------------------

    def create_file(self, name: str) -> int:
        raw = name.encode()
        if not raw or len(raw) > MAX_NAME:
            raise FsError("name must be 1..255 bytes")
        with self._lock:
            if name in self._names:
                raise DuplicateNameError(name)
            ino = next((i for i in range(1, self.layout.max_inodes + 1) if i not in self._inodes), None)
            if ino is None:
                raise TableFullError("inode table full")
            mtime = self._tick()
            self._log(OP_CREATE, struct.pack("<IQ", ino, mtime) + raw)
            self._inodes[ino] = Inode(ino, name, 0, mtime)
            self._names[name] = ino
            return ino

    def lookup(self, name: str) -> int:
        with self._lock:
            try:
                return self._names[name]
            except KeyError:
                raise NotFoundError(name) from None

    def exists(self, name: str) -> bool:
        return name in self._names

    def list_files(self) -> dict[str, int]:
        with self._lock:
            return dict(self._names)

    def name_of(self, ino: int) -> str:
        return self._inode(ino).name

    def stat(self, ino: int) -> Stat:
        with self._lock:
            inode = self._inode(ino)
            return Stat(inode.size, inode.mtime)

    def extents(self, ino: int) -> list[Extent]:
        with self._lock:
            return list(self._inode(ino).extents)

    def allocated_bytes(self, ino: int) -> int:
        with self._lock:
            return self._inode(ino).nblocks * self.block_size

    def preallocate(self, ino: int, length: int) -> list[Extent]:
        """Reserve ``ceil(length / block_size)`` more blocks; size is unchanged."""
        with self._lock:
            inode = self._inode(ino)
            n = -(-length // self.block_size)
            if n <= 0:
                return []
            return self._allocate_for(inode, n, self._tick())

    def write(self, ino: int, offset: int, data: bytes) -> None:
        bs = self.block_size
        with self._lock:
            inode = self._inode(ino)
            end = offset + len(data)
            if not data:
                return
            lb0, lb1 = offset // bs, -(-end // bs)
            have = inode.nblocks
            self._check_initiator_access(inode, lb0, min(lb1, have) - lb0 if have > lb0 else 0)
            mtime = self._tick()
            allocated = False
            if lb1 > have:
                self._allocate_for(inode, lb1 - have, mtime)
                allocated = True
            head = offset - lb0 * bs
            tail = lb1 * bs - end
            buf = bytearray()
            if head:
                if lb0 * bs < inode.size:
                    buf += self._read_lblocks(inode, lb0, 1)[:head]
                else:
                    buf += bytes(head)
            buf += data
            if tail:
                if end < inode.size:
                    last = self._read_lblocks(inode, lb1 - 1, 1)
                    buf += last[bs - tail:]
                else:
                    buf += bytes(tail)
            pos = 0
            for _, phys, n in inode.phys_runs(lb0, lb1 - lb0, bs):
                self.volume.write_blocks(phys, bytes(buf[pos:pos + n * bs]))
                pos += n * bs
            inode.mtime = mtime
            if end > inode.size:
                inode.size = end
                self._log(OP_SETSIZE, struct.pack("<IQQ", ino, inode.size, mtime))
            elif allocated:
                self._log(OP_SETSIZE, struct.pack("<IQQ", ino, inode.size, mtime))

    def write_reserved(self, ino: int, offset: int, data: bytes) -> None:
        """Write block-aligned data into already reserved blocks; size is left alone.

        Logs use this for their hot append path: content is self-validating
        (per-record crc), so the size is fixed up once via :meth:`set_size`.
        """
        bs = self.block_size
        if offset % bs:
            raise FsError("write_reserved needs a block-aligned offset")
        if not data:
            return
        pad = (-len(data)) % bs
        with self._lock:
            inode = self._inode(ino)
            lb0, n = offset // bs, (len(data) + pad) // bs
            if lb0 + n > inode.nblocks:
                raise FsError("write_reserved beyond the file's reservation")
            self._check_initiator_access(inode, lb0, n)
            runs = inode.phys_runs(lb0, n, bs)
            inode.mtime = self._tick()
        buf = bytes(data) + bytes(pad) if pad else bytes(data)
        pos = 0
        for _, phys, k in runs:
            self.volume.write_blocks(phys, buf[pos:pos + k * bs])
            pos += k * bs

    def set_size(self, ino: int, size: int) -> None:
        with self._lock:
            inode = self._inode(ino)
            if size > inode.nblocks * self.block_size:
                raise FsError("size beyond the file's reservation")
            mtime = self._tick()
            self._log(OP_SETSIZE, struct.pack("<IQQ", ino, size, mtime))
            inode.size = size
            inode.mtime = mtime

    def _read_lblocks(self, inode: Inode, lblock: int, count: int) -> bytes:
        parts = [self.volume.read_blocks(phys, n)
                 for _, phys, n in inode.phys_runs(lblock, count, self.block_size)]
        return parts[0] if len(parts) == 1 else b"".join(parts)

    def read(self, ino: int, offset: int, length: int) -> bytes:
        bs = self.block_size
        with self._lock:
            inode = self._inode(ino)
            if offset < 0 or length < 0 or offset + length > inode.size:
                raise FsError(f"read [{offset}, {offset + length}) beyond size {inode.size}")
            if not length:
                return b""
            lb0, lb1 = offset // bs, -(-(offset + length) // bs)
            self._check_initiator_access(inode, lb0, lb1 - lb0)
            runs = inode.phys_runs(lb0, lb1 - lb0, bs)
        data = b"".join(self.volume.read_blocks(phys, n) for _, phys, n in runs)
        start = offset - lb0 * bs
        return data[start:start + length]

    def read_blocks(self, ino: int, lblock: int, count: int) -> bytes:
        """Whole logical blocks of a file, including bytes past ``size`` in the last one."""
        with self._lock:
            inode = self._inode(ino)
            if lblock < 0 or lblock + count > inode.nblocks:
                raise FsError("block range beyond file allocation")
            self._check_initiator_access(inode, lblock, count)
            runs = inode.phys_runs(lblock, count, self.block_size)
        return b"".join(self.volume.read_blocks(phys, n) for _, phys, n in runs)

    def release_tail(self, ino: int, keep: int) -> int:
        """Free reserved blocks beyond ``keep`` bytes; returns the number of blocks freed."""
        bs = self.block_size
        with self._lock:
            inode = self._inode(ino)
            keep_blocks = -(-keep // bs)
            if keep_blocks > inode.nblocks:
                raise FsError(f"keep {keep} exceeds reservation of {inode.nblocks} blocks")
            extra = inode.nblocks - keep_blocks
            if not extra:
                return 0
            self._check_initiator_access(inode, keep_blocks, extra, include_reads=True)
            return sum(n for _, n in self._trim(inode, keep_blocks))

    def _trim(self, inode: Inode, keep_blocks: int) -> list[tuple[int, int]]:
        mtime = self._tick()
        self._log(OP_TRIM, struct.pack("<IQQ", inode.ino, keep_blocks, mtime))
        freed = inode.trim(keep_blocks)
        for phys, n in freed:
            self.space.release(phys, n)
        inode.size = min(inode.size, keep_blocks * self.block_size)
        inode.mtime = mtime
        return freed

    def delete_file(self, ino: int) -> int:
        with self._lock:
            inode = self._inode(ino)
            self._check_initiator_access(inode, 0, inode.nblocks, include_reads=True)
            self._log(OP_DELETE, struct.pack("<I", ino))
            for ext in inode.extents:
                self.space.release(ext.phys_start, ext.length)
            del self._inodes[ino]
            del self._names[inode.name]
            self._tick()
            return inode.nblocks

    # -- accounting ---------------------------------------------------------------

    def live_blocks(self) -> int:
        with self._lock:
            return sum(i.nblocks for i in self._inodes.values())

    def check(self) -> None:
        """Assert space accounting: allocated == metadata + sum of live extents, no sharing."""
        with self._lock:
            owner: dict[int, int] = {}
            for inode in self._inodes.values():
                for b in _blocks_of(FileExtent(inode.ino, e.logical_offset, e.phys_start, e.length)
                                    for e in inode.extents):
                    if b < self.layout.data_start:
                        raise CorruptMetadataError(f"inode {inode.ino} owns metadata block {b}")
                    if b in owner:
                        raise CorruptMetadataError(f"block {b} owned by {owner[b]} and {inode.ino}")
                    if not self.space.is_allocated(b):
                        raise CorruptMetadataError(f"block {b} of inode {inode.ino} marked free")
                    owner[b] = inode.ino
                if inode.size > inode.nblocks * self.block_size:
                    raise CorruptMetadataError(f"inode {inode.ino} size exceeds its extents")
            if self.space.allocated != self.layout.data_start + len(owner):
                raise CorruptMetadataError(
                    f"allocated {self.space.allocated} != {self.layout.data_start} + {len(owner)}")

    # -- leases -------------------------------------------------------------------

    def file_extents(self, ino: int, offset: int = 0, length: int | None = None) -> list[FileExtent]:
        """Physical extents covering bytes ``[offset, offset+length)`` of a file, block aligned."""
        bs = self.block_size
        with self._lock:
            inode = self._inode(ino)
            if length is None:
                length = inode.nblocks * bs - offset
            if length <= 0:
                return []
            lb0, lb1 = offset // bs, -(-(offset + length) // bs)
            return [FileExtent(ino, lb * bs, phys, n)
                    for lb, phys, n in inode.phys_runs(lb0, lb1 - lb0, bs)]

    def _validate_owned(self, ext: FileExtent) -> None:
        inode = self._inode(ext.ino)
        bs = self.block_size
        if ext.length < 1 or ext.logical_offset % bs:
            raise LeaseError(f"malformed extent {ext}")
        lb = ext.logical_offset // bs
        if lb + ext.length > inode.nblocks:
            raise LeaseError(f"extent {ext} beyond inode {ext.ino}'s allocation")
        pos = ext.phys_start
        for _, phys, n in inode.phys_runs(lb, ext.length, bs):
            if phys != pos:
                raise LeaseError(f"extent {ext} is not owned by inode {ext.ino} as stated")
            pos += n

    def grant_lease(self, read_extents: Iterable[FileExtent] = (), write_extents: Iterable[FileExtent] = (),
                    mtime_hints: list[tuple[int, int]] | None = None, initiator_id: int = 0) -> Lease:
        read_extents = list(read_extents)
        write_extents = list(write_extents)
        with self._lock:
            for ext in read_extents + write_extents:
                self._validate_owned(ext)
            wblocks = list(_blocks_of(write_extents))
            for b in wblocks:
                if b in self._write_leased or b in self._read_leased:
                    raise LeaseConflictError(f"block {b} already leased")
            for b in _blocks_of(read_extents):
                if b in self._write_leased:
                    raise LeaseConflictError(f"block {b} is in an active write set")
            if mtime_hints is None:
                inos = dict.fromkeys(e.ino for e in read_extents + write_extents)
                mtime_hints = [(i, self._inodes[i].mtime) for i in inos]
            lease = Lease(next(self._lease_ids), read_extents, write_extents, list(mtime_hints),
                          initiator_id=initiator_id, volume_id=self.volume.volume_id)
            for b in wblocks:
                self._write_leased[b] = lease.lease_id
            for b in _blocks_of(read_extents):
                self._read_leased[b] = self._read_leased.get(b, 0) + 1
            self._leases[lease.lease_id] = lease
            return lease

    def active_leases(self) -> list[Lease]:
        with self._lock:
            return [l for l in self._leases.values() if l.state == "active"]

    def lease(self, lease_id: int) -> Lease:
        with self._lock:
            try:
                return self._leases[lease_id]
            except KeyError:
                raise LeaseError(f"unknown lease {lease_id}") from None

    def _end_lease(self, lease: Lease, state: str) -> None:
        for b in _blocks_of(lease.write_set):
            self._write_leased.pop(b, None)
        for b in _blocks_of(lease.read_set):
            left = self._read_leased[b] - 1
            if left:
                self._read_leased[b] = left
            else:
                del self._read_leased[b]
        lease.state = state
        del self._leases[lease.lease_id]

    def complete_lease(self, lease_id: int, bytes_written: list[int] | None = None) -> list[tuple[int, int]]:
        """Finish a lease: grow files to the bytes the task wrote, free unused reserved tails.

        ``bytes_written[i]`` is the number of valid bytes written from the start of
        write extent ``i``. Returns the freed ``(phys, n)`` runs.
        """
        with self._lock:
            lease = self.lease(lease_id)
            if lease.state != "active":
                raise LeaseError(f"lease {lease_id} is {lease.state}")
            if bytes_written is None:
                bytes_written = [0] * len(lease.write_set)
            if len(bytes_written) != len(lease.write_set):
                raise LeaseError("bytes_written must have one entry per write extent")
            self._end_lease(lease, "completed")
            return self._settle_writes(lease, bytes_written)

    def abort_lease(self, lease_id: int) -> list[tuple[int, int]]:
        """Abandon a lease; reserved blocks it would have filled are reclaimed."""
        with self._lock:
            lease = self.lease(lease_id)
            self._end_lease(lease, "aborted")
            return self._settle_writes(lease, [0] * len(lease.write_set))

    def _settle_writes(self, lease: Lease, bytes_written: list[int]) -> list[tuple[int, int]]:
        bs = self.block_size
        ends: dict[int, int] = {}
        wblocks: dict[int, set[int]] = {}
        for ext, n in zip(lease.write_set, bytes_written):
            if n < 0 or n > ext.length * bs:
                raise LeaseError(f"bytes_written {n} outside extent of {ext.length} blocks")
            if ext.ino not in self._inodes:
                continue
            wblocks.setdefault(ext.ino, set()).update(range(ext.phys_start, ext.phys_start + ext.length))
            if n:
                ends[ext.ino] = max(ends.get(ext.ino, 0), ext.logical_offset + n)
        freed: list[tuple[int, int]] = []
        for ino, blocks in wblocks.items():
            inode = self._inodes[ino]
            mtime = self._tick()
            if ino in ends and ends[ino] > inode.size:
                inode.size = ends[ino]
                inode.mtime = mtime
                self._log(OP_SETSIZE, struct.pack("<IQQ", ino, inode.size, mtime))
            keep_blocks = -(-inode.size // bs)
            cut = inode.nblocks
            # only reserved blocks that belong to this lease, taken from the tail
            for lb in range(inode.nblocks - 1, keep_blocks - 1, -1):
                (_, phys, _), = inode.phys_runs(lb, 1, bs)
                if phys not in blocks:
                    break
                cut = lb
            if cut < inode.nblocks:
                freed.extend(self._trim(inode, cut))
        return freed


class LeaseContext:
    """Lease-scoped I/O: every access must fall inside the lease's read or write set.

    Subclasses decide where blocks come from (a target's Offload Cache, or the
    initiator's own volume when a task falls back to local execution).
    """

    def __init__(self, volume: Volume, lease: Lease):
        self.volume = volume
        self.lease = lease
        self.block_size = volume.block_size
        self.active = True
        self._read_idx = self._index(lease.read_set + lease.write_set)
        self._write_idx = self._index(lease.write_set)
        self._hw = [0] * len(lease.write_set)
        self._wpos = {id(e): i for i, e in enumerate(lease.write_set)}
        self.blocks_read = 0
        self.blocks_written = 0

    @staticmethod
    def _index(extents: list[FileExtent]):
        items = sorted(extents, key=lambda e: e.phys_start)
        return [e.phys_start for e in items], items

    @staticmethod
    def _segments(idx, phys: int, count: int) -> list[tuple[FileExtent, int, int]]:
        starts, items = idx
        out = []
        pos, end = phys, phys + count
        while pos < end:
            i = bisect.bisect_right(starts, pos) - 1
            if i < 0 or items[i].phys_start + items[i].length <= pos:
                # overlapping extents in the index: try the next one that covers pos
                cover = [e for e in items if e.phys_start <= pos < e.phys_start + e.length]
                if not cover:
                    return []
                ext = cover[0]
            else:
                ext = items[i]
            n = min(end, ext.phys_start + ext.length) - pos
            out.append((ext, pos, n))
            pos += n
        return out

    def _require_active(self) -> None:
        if not self.active or self.lease.state != "active":
            raise StaleLeaseError(f"lease {self.lease.lease_id} is no longer active")

    def offload_read(self, phys: int, count: int) -> bytes:
        self._require_active()
        if count <= 0:
            return b""
        segs = self._segments(self._read_idx, phys, count)
        if not segs:
            raise AuthorizationError(f"read of blocks [{phys}, {phys + count}) outside lease")
        parts = [self._read(pos, n, self.lease.hint_for(ext.ino)) for ext, pos, n in segs]
        self.blocks_read += count
        return parts[0] if len(parts) == 1 else b"".join(parts)

    def offload_write(self, phys: int, data: bytes, valid: int | None = None) -> None:
        """Write whole blocks at ``phys``; ``valid`` bytes of ``data`` count as file content."""
        self._require_active()
        bs = self.block_size
        if len(data) % bs:
            raise ValueError("offload_write takes whole blocks")
        count = len(data) // bs
        if not count:
            return
        segs = self._segments(self._write_idx, phys, count)
        if not segs:
            raise AuthorizationError(f"write of blocks [{phys}, {phys + count}) outside lease")
        valid = len(data) if valid is None else valid
        self._write(phys, data)
        self.blocks_written += count
        for ext, pos, n in segs:
            i = self._write_slot(ext)
            rel_start = (pos - phys) * bs
            seg_valid = min(max(valid - rel_start, 0), n * bs)
            if seg_valid:
                self._hw[i] = max(self._hw[i], (pos - ext.phys_start) * bs + seg_valid)

    def _write_slot(self, ext: FileExtent) -> int:
        i = self._wpos.get(id(ext))
        if i is None:
            i = self.lease.write_set.index(ext)
        return i

    @property
    def bytes_written(self) -> list[int]:
        return list(self._hw)

    # logical-file helpers over lists of FileExtent

    def read_file(self, extents: list[FileExtent], offset: int, length: int) -> bytes:
        bs = self.block_size
        out = []
        base = extents[0].logical_offset if extents else 0
        want0, want1 = base + offset, base + offset + length
        for ext in extents:
            e0, e1 = ext.logical_offset, ext.logical_offset + ext.length * bs
            s, t = max(e0, want0), min(e1, want1)
            if s >= t:
                continue
            b0, b1 = (s - e0) // bs, -(-(t - e0) // bs)
            chunk = self.offload_read(ext.phys_start + b0, b1 - b0)
            skip = s - (e0 + b0 * bs)
            out.append(chunk[skip:skip + (t - s)])
        data = b"".join(out)
        if len(data) != length:
            raise AuthorizationError("read range not covered by the given extents")
        return data

    def write_file(self, extents: list[FileExtent], data: bytes) -> int:
        """Write ``data`` from the start of ``extents`` (zero-padding the last block)."""
        bs = self.block_size
        pos = 0
        for ext in extents:
            if pos >= len(data):
                break
            chunk = data[pos:pos + ext.length * bs]
            valid = len(chunk)
            pad = (-valid) % bs
            self.offload_write(ext.phys_start, chunk + bytes(pad), valid)
            pos += valid
        if pos < len(data):
            raise OutOfSpaceError(f"{len(data) - pos} bytes do not fit in the reserved extents")
        return pos

    def _read(self, phys: int, count: int, hint: int) -> bytes:
        return self.volume.read_blocks(phys, count)

    def _write(self, phys: int, data: bytes) -> None:
        self.volume.write_blocks(phys, data)

    def close(self) -> None:
        self.active = False


class LocalContext(LeaseContext):
    """Lease-scoped I/O executed on the initiator itself (local fallback path).

    ``block_cache`` (optional) is the application's own block cache; when given,
    reads and writes go through it, which is how local compaction pollutes it.
    """

    def __init__(self, volume: Volume, lease: Lease, block_cache=None):
        super().__init__(volume, lease)
        self.block_cache = block_cache

    def _read(self, phys, count, hint):
        if self.block_cache is None:
            return super()._read(phys, count, hint)
        return self.block_cache.read_phys(self.volume, phys, count, background=True)

    def _write(self, phys, data):
        super()._write(phys, data)
        if self.block_cache is not None and self.block_cache.cache_writes:
            self.block_cache.fill_phys(phys, data, background=True)
