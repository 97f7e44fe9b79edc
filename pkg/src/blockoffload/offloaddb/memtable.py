"""In-memory write buffer with ordered iteration.

Entries live in a dict for point lookups; the key order is materialized with
one sort when the table is frozen (or on demand while it is still active).
Each entry remembers where its record sits in the table's log file, which is
what makes the offset array possible.
"""
from __future__ import annotations

from dataclasses import dataclass

from blockoffload.offloaddb.wal import OP_DELETE, OP_PUT, record_size


@dataclass(frozen=True)
class MemEntry:
    key: bytes
    value: bytes
    seq: int
    op: int
    wal_offset: int

    @property
    def deleted(self) -> bool:
        return self.op == OP_DELETE


class MemTable:
    def __init__(self, log_no: int, budget: int):
        self.log_no = log_no
        self.budget = budget
        self._entries: dict[bytes, MemEntry] = {}
        self._sorted: list[MemEntry] | None = None
        self.bytes = 0
        self.frozen = False
        self.min_seq = 0
        self.max_seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, entry: MemEntry) -> None:
        if self.frozen:
            raise RuntimeError("memtable is immutable")
        prev = self._entries.get(entry.key)
        if prev is not None and prev.seq > entry.seq:
            return
        self._entries[entry.key] = entry
        self._sorted = None
        self.bytes += record_size(len(entry.key), len(entry.value))
        self.min_seq = entry.seq if not self.min_seq else min(self.min_seq, entry.seq)
        self.max_seq = max(self.max_seq, entry.seq)

    def put(self, key: bytes, value: bytes, seq: int, wal_offset: int) -> None:
        self.add(MemEntry(key, value, seq, OP_PUT, wal_offset))

    def delete(self, key: bytes, seq: int, wal_offset: int) -> None:
        self.add(MemEntry(key, b"", seq, OP_DELETE, wal_offset))

    def get(self, key: bytes) -> MemEntry | None:
        return self._entries.get(key)

    @property
    def full(self) -> bool:
        return self.bytes >= self.budget

    def freeze(self) -> None:
        self.frozen = True
        self.entries()

    def entries(self) -> list[MemEntry]:
        """Entries in ascending key order."""
        if self._sorted is None:
            self._sorted = [self._entries[k] for k in sorted(self._entries)]
        return self._sorted

    def offset_array(self) -> list[int]:
        """Log offsets of the live entries, listed in ascending key order."""
        return [e.wal_offset for e in self.entries()]

    @property
    def smallest(self) -> bytes:
        return self.entries()[0].key if self._entries else b""

    @property
    def largest(self) -> bytes:
        return self.entries()[-1].key if self._entries else b""
