"""The application's own block cache on the initiator.

Keyed by physical block address. Foreground lookups (point reads) and
background traffic (compaction run locally) are counted separately so the
foreground hit ratio can be reported on its own. Blocks are dropped when the
file system frees them, so a reused address never serves old bytes.

Blocks enter the cache when they are read. Freshly written table blocks are
only inserted when ``cache_writes`` is set (write-through); by default they
are not, so local compaction occupies the cache with the victim blocks it
reads rather than with its outputs.
"""
from __future__ import annotations

import threading
from collections import OrderedDict

from blockoffload.volume import Volume


class BlockCache:
    def __init__(self, capacity_blocks: int, block_size: int = 4096, cache_writes: bool = False):
        self.capacity_blocks = capacity_blocks
        self.block_size = block_size
        self.cache_writes = cache_writes
        self._blocks: OrderedDict[int, bytes] = OrderedDict()
        self._lock = threading.Lock()
        self.fg_hits = 0
        self.fg_misses = 0
        self.bg_hits = 0
        self.bg_misses = 0
        self.bg_fills = 0

    def __len__(self) -> int:
        return len(self._blocks)

    def __contains__(self, phys: int) -> bool:
        return phys in self._blocks

    def fg_hit_ratio(self) -> float:
        total = self.fg_hits + self.fg_misses
        return self.fg_hits / total if total else 0.0

    def reset_stats(self) -> None:
        self.fg_hits = self.fg_misses = self.bg_hits = self.bg_misses = self.bg_fills = 0

    def _insert(self, phys: int, data: bytes) -> None:
        if self.capacity_blocks <= 0:
            return
        self._blocks[phys] = data
        self._blocks.move_to_end(phys)
        while len(self._blocks) > self.capacity_blocks:
            self._blocks.popitem(last=False)

    def read_phys(self, volume: Volume, phys: int, count: int, background: bool = False) -> bytes:
        bs = self.block_size
        out: list[bytes | None] = [None] * count
        with self._lock:
            for i in range(count):
                data = self._blocks.get(phys + i)
                if data is not None:
                    self._blocks.move_to_end(phys + i)
                    out[i] = data
            hits = sum(1 for d in out if d is not None)
            if background:
                self.bg_hits += hits
                self.bg_misses += count - hits
            else:
                self.fg_hits += hits
                self.fg_misses += count - hits
        i = 0
        while i < count:
            if out[i] is not None:
                i += 1
                continue
            j = i
            while j < count and out[j] is None:
                j += 1
            data = volume.read_blocks(phys + i, j - i)
            with self._lock:
                for k in range(i, j):
                    blk = data[(k - i) * bs:(k - i + 1) * bs]
                    out[k] = blk
                    self._insert(phys + k, blk)
            i = j
        return out[0] if count == 1 else b"".join(out)

    def fill_phys(self, phys: int, data: bytes, background: bool = True) -> None:
        bs = self.block_size
        with self._lock:
            for i in range(len(data) // bs):
                self._insert(phys + i, data[i * bs:(i + 1) * bs])
                self.bg_fills += background

    def invalidate_runs(self, runs) -> None:
        with self._lock:
            for phys, n in runs:
                for b in range(phys, phys + n):
                    self._blocks.pop(b, None)
