"""Sorted string table format.

::

    data     entry frames [u16 klen][key][u64 seq][u8 op][u32 vlen][value], sorted by key,
             grouped into chunks of roughly one block
    index    per chunk: [u16 klen][last key][u64 offset][u32 length]
    bounds   [u16 len][smallest key][u16 len][largest key]
    footer   fixed 52 bytes, crc32 over everything before it

Tables are immutable once written; a point lookup reads the footer and index
once and then a single chunk per probe.
"""
from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable

from blockoffload.errors import CorruptionError
from blockoffload.kernels import decode_entries

MAGIC = b"OSST"
VERSION = 1
_FRAME_HEAD = struct.Struct("<H")
_FRAME_TAIL = struct.Struct("<QBI")
_IDX = struct.Struct("<QI")
FOOTER = struct.Struct("<4sHHIIQIIQQI")
FRAME_OVERHEAD = _FRAME_HEAD.size + _FRAME_TAIL.size


def encode_entry(key: bytes, seq: int, op: int, value: bytes) -> bytes:
    return _FRAME_HEAD.pack(len(key)) + key + _FRAME_TAIL.pack(seq, op, len(value)) + value


def entry_size(key_len: int, value_len: int) -> int:
    return FRAME_OVERHEAD + key_len + value_len


@dataclass(frozen=True)
class TableProps:
    entries: int
    chunks: int
    data_len: int
    index_len: int
    bounds_len: int
    min_seq: int
    max_seq: int
    smallest: bytes
    largest: bytes

    @property
    def size(self) -> int:
        return self.data_len + self.index_len + self.bounds_len + FOOTER.size


class SstBuilder:
    def __init__(self, chunk_bytes: int = 4096):
        self.chunk_bytes = chunk_bytes
        self.data = bytearray()
        self.index = bytearray()
        self.chunks = 0
        self.entries = 0
        self._chunk_start = 0
        self._last_key = b""
        self.smallest = b""
        self.largest = b""
        self.min_seq = 0
        self.max_seq = 0
        self._max_key = 0

    def add(self, key: bytes, seq: int, op: int, value: bytes) -> None:
        if self.entries and key <= self._last_key:
            raise ValueError("keys must be added in strictly ascending order")
        self.data += encode_entry(key, seq, op, value)
        if not self.entries:
            self.smallest = key
            self.min_seq = seq
        self.largest = key
        self.min_seq = min(self.min_seq, seq)
        self.max_seq = max(self.max_seq, seq)
        self._max_key = max(self._max_key, len(key))
        self._last_key = key
        self.entries += 1
        if len(self.data) - self._chunk_start >= self.chunk_bytes:
            self._close_chunk()

    def _close_chunk(self) -> None:
        if len(self.data) == self._chunk_start:
            return
        self.index += _FRAME_HEAD.pack(len(self._last_key)) + self._last_key + _IDX.pack(
            self._chunk_start, len(self.data) - self._chunk_start)
        self._chunk_start = len(self.data)
        self.chunks += 1

    def size_if_added(self, key_len: int, value_len: int) -> int:
        """Upper bound on the finished size if one more entry of this shape were added."""
        k = max(self._max_key, key_len)
        return (len(self.data) + entry_size(key_len, value_len) + len(self.index)
                + 2 * (2 + k + _IDX.size) + 2 * (2 + k) + FOOTER.size)

    def finish(self) -> bytes:
        self._close_chunk()
        bounds = (_FRAME_HEAD.pack(len(self.smallest)) + self.smallest
                  + _FRAME_HEAD.pack(len(self.largest)) + self.largest)
        body = bytes(self.data) + bytes(self.index) + bounds
        footer = FOOTER.pack(MAGIC, VERSION, 0, self.entries, self.chunks, len(self.data),
                             len(self.index), len(bounds), self.min_seq, self.max_seq, zlib.crc32(body))
        return body + footer

    @property
    def props(self) -> TableProps:
        bounds_len = 4 + len(self.smallest) + len(self.largest)
        return TableProps(self.entries, self.chunks, len(self.data), len(self.index), bounds_len,
                          self.min_seq, self.max_seq, self.smallest, self.largest)


def build_table(entries: Iterable[tuple[bytes, int, int, bytes]], chunk_bytes: int = 4096) -> bytes:
    b = SstBuilder(chunk_bytes)
    for key, seq, op, value in entries:
        b.add(key, seq, op, value)
    return b.finish()


def parse_footer(raw: bytes) -> tuple:
    if len(raw) != FOOTER.size:
        raise CorruptionError("short table footer")
    fields = FOOTER.unpack(raw)
    if fields[0] != MAGIC or fields[1] != VERSION:
        raise CorruptionError("bad table magic")
    return fields


class SstReader:
    """Reads a table through ``read(offset, length)``; footer and index are loaded eagerly."""

    def __init__(self, size: int, read: Callable[[int, int], bytes]):
        if size < FOOTER.size:
            raise CorruptionError(f"table of {size} bytes is too small")
        self.size = size
        self._read = read
        (_, _, _, entries, chunks, data_len, index_len, bounds_len, min_seq, max_seq,
         self.crc) = parse_footer(read(size - FOOTER.size, FOOTER.size))
        if data_len + index_len + bounds_len + FOOTER.size != size:
            raise CorruptionError("table footer does not match file size")
        meta = read(data_len, index_len + bounds_len)
        self._index_keys: list[bytes] = []
        self._index: list[tuple[int, int]] = []
        p = 0
        for _ in range(chunks):
            (klen,) = _FRAME_HEAD.unpack_from(meta, p)
            self._index_keys.append(bytes(meta[p + 2:p + 2 + klen]))
            p += 2 + klen
            self._index.append(_IDX.unpack_from(meta, p))
            p += _IDX.size
        if p != index_len:
            raise CorruptionError("table index length mismatch")
        (slen,) = _FRAME_HEAD.unpack_from(meta, p)
        smallest = bytes(meta[p + 2:p + 2 + slen])
        p += 2 + slen
        (llen,) = _FRAME_HEAD.unpack_from(meta, p)
        largest = bytes(meta[p + 2:p + 2 + llen])
        self.props = TableProps(entries, chunks, data_len, index_len, bounds_len, min_seq, max_seq,
                                smallest, largest)

    @classmethod
    def from_bytes(cls, buf: bytes, verify: bool = True) -> "SstReader":
        mv = memoryview(buf)
        reader = cls(len(buf), lambda off, n: bytes(mv[off:off + n]))
        if verify and zlib.crc32(mv[:len(buf) - FOOTER.size]) != reader.crc:
            raise CorruptionError("table checksum mismatch")
        reader._data = bytes(mv[:reader.props.data_len])
        return reader

    def chunk_for(self, key: bytes) -> tuple[int, int] | None:
        i = bisect.bisect_left(self._index_keys, key)
        return self._index[i] if i < len(self._index) else None

    def get(self, key: bytes, read_chunk: Callable[[int, int], bytes] | None = None):
        """``(seq, op, value)`` for ``key`` or ``None``."""
        if not self.props.entries or key < self.props.smallest or key > self.props.largest:
            return None
        loc = self.chunk_for(key)
        if loc is None:
            return None
        off, n = loc
        chunk = (read_chunk or self._read)(off, n)
        for k, seq, op, value in decode_entries(chunk, 0, n):
            if k == key:
                return seq, op, value
            if k > key:
                break
        return None

    def entries(self) -> list[tuple[bytes, int, int, bytes]]:
        data = getattr(self, "_data", None)
        if data is None:
            data = self._read(0, self.props.data_len)
        return decode_entries(data, 0, self.props.data_len)
