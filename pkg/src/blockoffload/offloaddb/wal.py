"""Write-ahead log: one file per MemTable, self-validating records.

Record frame: ``[u32 len][u64 seq][u8 op][u16 klen][key][u32 vlen][value][u32 crc32]``
where ``len`` counts the bytes from ``seq`` through ``value`` and the crc covers
the same bytes, seeded with the log number so a record left behind in a reused
block by another log never validates.
"""
from __future__ import annotations

import struct
import zlib
from collections import deque
from dataclasses import dataclass

from blockoffload.errors import CorruptionError
from blockoffload.extentfs import ExtentFS

OP_PUT, OP_DELETE = 1, 0
_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<QBH")
_VLEN = struct.Struct("<I")
MAX_RECORD = 1 << 24


@dataclass(frozen=True)
class WalRecord:
    offset: int
    seq: int
    op: int
    key: bytes
    value: bytes


def wal_name(log_no: int) -> str:
    return f"wal-{log_no:06d}"


def encode_record(log_no: int, seq: int, op: int, key: bytes, value: bytes) -> bytes:
    body = _HEAD.pack(seq, op, len(key)) + key + _VLEN.pack(len(value)) + value
    return _LEN.pack(len(body)) + body + _LEN.pack(zlib.crc32(body, log_no & 0xFFFFFFFF))


def record_size(key_len: int, value_len: int) -> int:
    return 4 + _HEAD.size + key_len + 4 + value_len + 4


def decode_record_at(buf, offset: int, log_no: int) -> WalRecord:
    """Parse the record at ``offset``; raises :class:`CorruptionError` if it does not validate."""
    rec = _try_decode(buf, offset, log_no)
    if rec is None:
        raise CorruptionError(f"log {log_no}: no valid record at offset {offset}")
    return rec


def _try_decode(buf, offset: int, log_no: int) -> WalRecord | None:
    if offset + 4 > len(buf):
        return None
    (n,) = _LEN.unpack_from(buf, offset)
    if n < _HEAD.size + 4 or n > MAX_RECORD or offset + 8 + n > len(buf):
        return None
    body = bytes(buf[offset + 4:offset + 4 + n])
    (crc,) = _LEN.unpack_from(buf, offset + 4 + n)
    if zlib.crc32(body, log_no & 0xFFFFFFFF) != crc:
        return None
    seq, op, klen = _HEAD.unpack_from(body)
    key = body[_HEAD.size:_HEAD.size + klen]
    (vlen,) = _VLEN.unpack_from(body, _HEAD.size + klen)
    value = body[_HEAD.size + klen + 4:]
    if len(value) != vlen:
        return None
    return WalRecord(offset, seq, op, key, value)


def scan_records(buf, log_no: int) -> tuple[list[WalRecord], int]:
    """All valid records from the start of a log, and the byte offset where validity ends."""
    out = []
    pos = 0
    last_seq = -1
    while True:
        rec = _try_decode(buf, pos, log_no)
        if rec is None or rec.seq <= last_seq:
            break
        out.append(rec)
        last_seq = rec.seq
        pos += 8 + (len(rec.key) + len(rec.value) + _HEAD.size + 4)
    return out, pos


class WalWriter:
    """Appends records to a preallocated log file.

    ``sync="lazy"`` writes each block once, when it fills (and the tail at
    close); ``sync="each"`` also rewrites the partial tail block after every
    record so each acknowledged write is durable.
    """

    def __init__(self, fs: ExtentFS, ino: int, log_no: int, sync: str = "lazy", chunk: int = 64 << 10):
        self.fs = fs
        self.ino = ino
        self.log_no = log_no
        self.sync_each = sync == "each"
        self.chunk = max(chunk, fs.block_size)
        self.offset = 0
        self.durable_offset = 0
        self.durable_seq = 0
        self.last_seq = 0
        self._tail = bytearray()
        self._tail_start = 0
        self._pending: deque[tuple[int, int]] = deque()
        self._reserved = fs.allocated_bytes(ino)
        self.closed = False

    def _reserve(self, upto: int) -> None:
        if upto > self._reserved:
            bs = self.fs.block_size
            need = max(upto - self._reserved, self.chunk)
            self.fs.preallocate(self.ino, need)
            self._reserved = self.fs.allocated_bytes(self.ino)
            assert self._reserved >= upto and self._reserved % bs == 0

    def append(self, seq: int, op: int, key: bytes, value: bytes) -> int:
        rec = encode_record(self.log_no, seq, op, key, value)
        at = self.offset
        self._reserve(at + len(rec) + self.fs.block_size)
        self._tail += rec
        self.offset += len(rec)
        self.last_seq = seq
        self._pending.append((self.offset, seq))
        bs = self.fs.block_size
        full = len(self._tail) // bs * bs
        if full:
            self.fs.write_reserved(self.ino, self._tail_start, bytes(self._tail[:full]))
            del self._tail[:full]
            self._tail_start += full
            self._mark_durable(self._tail_start if self._tail else self.offset)
        if self.sync_each and self._tail:
            self.fs.write_reserved(self.ino, self._tail_start, bytes(self._tail))
            self._mark_durable(self.offset)
        return at

    def _mark_durable(self, upto: int) -> None:
        # a record is durable once every byte of it has reached the volume
        self.durable_offset = upto
        pending = self._pending
        while pending and pending[0][0] <= upto:
            self.durable_seq = pending.popleft()[1]

    def flush_tail(self) -> None:
        if self._tail:
            self.fs.write_reserved(self.ino, self._tail_start, bytes(self._tail))
        self._mark_durable(self.offset)

    def close(self) -> None:
        """Persist the tail, fix the size, and return the unused reservation."""
        if self.closed:
            return
        self.flush_tail()
        self.fs.set_size(self.ino, self.offset)
        self.fs.release_tail(self.ino, self.offset)
        self.closed = True


def read_log(fs: ExtentFS, ino: int) -> bytes:
    """Every allocated byte of a log file (size may lag behind its content)."""
    n = fs.allocated_bytes(ino) // fs.block_size
    return fs.read_blocks(ino, 0, n) if n else b""
