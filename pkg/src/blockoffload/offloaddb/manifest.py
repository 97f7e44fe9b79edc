"""MANIFEST: the append-only log of table additions and deletions.

An edit is committed exactly when its frame ``[u32 len][json][u32 crc32]`` is
fully on the volume. Replay stops at the first frame that does not validate;
that frame is a torn tail unless a valid frame follows it, which means the
committed prefix itself is damaged.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

from blockoffload.errors import CorruptionError
from blockoffload.extentfs import ExtentFS
from blockoffload.offloaddb.wal import read_log

MANIFEST_NAME = "MANIFEST"
_LEN = struct.Struct("<I")
_MAX_EDIT = 1 << 24


@dataclass
class SstMeta:
    id: int
    level: int
    smallest: bytes
    largest: bytes
    entries: int
    min_seq: int
    max_seq: int
    size: int  # bytes on the volume; for a log-backed table, the bytes it would occupy
    wal: int | None = None  # log number backing an unmaterialized level-0 table

    @property
    def name(self) -> str:
        return f"sst-{self.id:06d}"

    @property
    def log_backed(self) -> bool:
        return self.wal is not None

    def overlaps(self, lo: bytes, hi: bytes) -> bool:
        return not (self.largest < lo or self.smallest > hi)

    def to_json(self) -> dict:
        d = asdict(self)
        d["smallest"] = self.smallest.hex()
        d["largest"] = self.largest.hex()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SstMeta":
        d = dict(d)
        d["smallest"] = bytes.fromhex(d["smallest"])
        d["largest"] = bytes.fromhex(d["largest"])
        return cls(**d)


@dataclass
class ManifestEdit:
    added: list[SstMeta] = field(default_factory=list)
    deleted: list[int] = field(default_factory=list)
    flushed_log: int | None = None
    wal_released_up_to: int | None = None
    last_seq: int | None = None
    next_file: int | None = None

    def encode(self) -> bytes:
        doc = {"add": [m.to_json() for m in self.added], "del": self.deleted}
        for key in ("flushed_log", "wal_released_up_to", "last_seq", "next_file"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        body = json.dumps(doc, separators=(",", ":"), sort_keys=True).encode()
        return _LEN.pack(len(body)) + body + _LEN.pack(zlib.crc32(body))

    @classmethod
    def decode(cls, body: bytes) -> "ManifestEdit":
        doc = json.loads(body)
        return cls([SstMeta.from_json(m) for m in doc.get("add", [])], list(doc.get("del", [])),
                   doc.get("flushed_log"), doc.get("wal_released_up_to"), doc.get("last_seq"),
                   doc.get("next_file"))


def _frame_at(buf, pos: int):
    if pos + 8 > len(buf):
        return None, 0
    (n,) = _LEN.unpack_from(buf, pos)
    if n == 0 or n > _MAX_EDIT or pos + 8 + n > len(buf):
        return None, n
    body = bytes(buf[pos + 4:pos + 4 + n])
    (crc,) = _LEN.unpack_from(buf, pos + 4 + n)
    if zlib.crc32(body) != crc:
        return None, n
    return body, n


def scan_edits(buf) -> tuple[list[ManifestEdit], int]:
    edits = []
    pos = 0
    while True:
        body, n = _frame_at(buf, pos)
        if body is None:
            break
        edits.append(ManifestEdit.decode(body))
        pos += 8 + n
    if 0 < n <= _MAX_EDIT:
        nxt, _ = _frame_at(buf, pos + 8 + n)
        if nxt is not None:
            raise CorruptionError(f"manifest edit at offset {pos} is damaged inside the committed prefix")
    return edits, pos


@dataclass
class ManifestState:
    tables: dict[int, SstMeta] = field(default_factory=dict)
    flushed_log: int = 0
    wal_released_up_to: int = 0
    last_seq: int = 0
    next_file: int = 1

    def apply(self, edit: ManifestEdit) -> None:
        for i in edit.deleted:
            self.tables.pop(i, None)
        for m in edit.added:
            self.tables[m.id] = m
        if edit.flushed_log is not None:
            self.flushed_log = max(self.flushed_log, edit.flushed_log)
        if edit.wal_released_up_to is not None:
            self.wal_released_up_to = max(self.wal_released_up_to, edit.wal_released_up_to)
        if edit.last_seq is not None:
            self.last_seq = max(self.last_seq, edit.last_seq)
        if edit.next_file is not None:
            self.next_file = max(self.next_file, edit.next_file)


class ManifestLog:
    """Appends edits to the MANIFEST file; each append is durable when it returns."""

    def __init__(self, fs: ExtentFS, ino: int, offset: int = 0, tail: bytes = b"", chunk: int = 64 << 10):
        self.fs = fs
        self.ino = ino
        self.offset = offset
        bs = fs.block_size
        self._tail_start = offset - offset % bs
        self._tail = bytearray(tail[:offset - self._tail_start])
        self.chunk = chunk
        self.edits_written = 0

    @classmethod
    def create(cls, fs: ExtentFS) -> "ManifestLog":
        ino = fs.create_file(MANIFEST_NAME)
        fs.preallocate(ino, 64 << 10)
        return cls(fs, ino)

    @classmethod
    def replay(cls, fs: ExtentFS) -> tuple["ManifestLog", ManifestState]:
        ino = fs.lookup(MANIFEST_NAME)
        buf = read_log(fs, ino)
        edits, end = scan_edits(buf)
        state = ManifestState()
        for e in edits:
            state.apply(e)
        bs = fs.block_size
        start = end - end % bs
        return cls(fs, ino, end, buf[start:end]), state

    def append(self, edit: ManifestEdit) -> None:
        frame = edit.encode()
        need = self.offset + len(frame)
        have = self.fs.allocated_bytes(self.ino)
        if need > have:
            self.fs.preallocate(self.ino, max(need - have, self.chunk))
        self._tail += frame
        self.offset = need
        self.fs.write_reserved(self.ino, self._tail_start, bytes(self._tail))
        bs = self.fs.block_size
        full = len(self._tail) // bs * bs
        if full:
            del self._tail[:full]
            self._tail_start += full
        self.edits_written += 1
