"""OffloadDB: a small LSM store whose flush and compaction can run near the data.

Write path: every put is appended to the active MemTable's own log file, and
the MemTable entry remembers the record's log offset. When the MemTable fills
it becomes immutable and is flushed in one of three ways:

* log-backed level-0 table: with log recycling on and room in the L0 cache,
  the immutable MemTable stays in initiator memory and the MANIFEST records a
  level-0 table backed by the log file. Nothing is sent anywhere.
* recycled: otherwise, with log recycling on, the offset array (log offsets in
  key order) is shipped to the flush site, which rebuilds the sorted table from
  the log blocks already on the volume.
* local: with log recycling off, the initiator builds the table and writes it.

Compaction merges victim tables (including log-backed ones) into
preallocated outputs at the site configured for that level; the MANIFEST edit
that swaps victims for outputs is the commit point.
"""
from __future__ import annotations

import bisect
import heapq
import threading
import time
from dataclasses import dataclass, field

from blockoffload.errors import NotFoundError, TaskFailedError
from blockoffload.extentfs import ExtentFS, FileExtent
from blockoffload.offloaddb.blockcache import BlockCache
from blockoffload.offloaddb.config import DbConfig
from blockoffload.offloaddb.manifest import MANIFEST_NAME, ManifestEdit, ManifestLog, ManifestState, SstMeta
from blockoffload.offloaddb.memtable import MemEntry, MemTable
from blockoffload.offloaddb.sstable import FOOTER, SstReader, build_table, entry_size
from blockoffload.offloaddb.stubs import (
    KIND_SST,
    KIND_WAL,
    LOG_RECYCLE,
    MERGE,
    MergeArgs,
    MergeInput,
    MergeOutput,
    RecycleArgs,
    log_recycle_stub,
    merge_stub,
    unpack_props,
)
from blockoffload.offloaddb.wal import OP_DELETE, OP_PUT, WalWriter, read_log, scan_records, wal_name
from blockoffload.task_offloader import SitePlan, TaskOffloader, TaskSpec
from blockoffload.transport import traffic

_PLANS = {"local": SitePlan.local(), "target": SitePlan.target(), "peer": SitePlan.peer(0)}


def table_reserve(data_len: int, entries: int, max_key: int, chunk: int) -> int:
    """Upper bound on the encoded size of a table with ``data_len`` bytes of frames."""
    chunks = min(entries, data_len // chunk + 1)
    return data_len + chunks * (2 + max_key + 12) + 4 + 2 * max_key + FOOTER.size


@dataclass
class Table:
    meta: SstMeta
    ino: int | None = None
    mem: MemTable | None = None
    reader: SstReader | None = None
    runs: list[tuple[int, int, int]] = field(default_factory=list)  # (first lblock, phys, n)
    compacting: bool = False

    @property
    def id(self) -> int:
        return self.meta.id


@dataclass
class DbStats:
    puts: int = 0
    gets: int = 0
    flushes: int = 0
    log_backed_flushes: int = 0
    recycled_flushes: int = 0
    local_flushes: int = 0
    compactions: int = 0
    compaction_retries: int = 0
    stall_seconds: float = 0.0
    table_reads: int = 0
    sites: dict = field(default_factory=lambda: {"local": 0, "target": 0, "peer": 0})


class L0Cache:
    """Immutable MemTables kept in memory in place of level-0 tables."""

    def __init__(self, capacity_bytes: int):
        self.capacity_bytes = capacity_bytes
        self.tables: dict[int, MemTable] = {}
        self.bytes = 0

    def fits(self, mem: MemTable) -> bool:
        return self.bytes + mem.bytes <= self.capacity_bytes

    def add(self, table_id: int, mem: MemTable) -> None:
        self.tables[table_id] = mem
        self.bytes += mem.bytes

    def evict(self, table_id: int) -> None:
        mem = self.tables.pop(table_id, None)
        if mem is not None:
            self.bytes -= mem.bytes

    def __contains__(self, table_id: int) -> bool:
        return table_id in self.tables

    def __len__(self) -> int:
        return len(self.tables)


class OffloadDB:
    def __init__(self, fs: ExtentFS, config: DbConfig, offloader: TaskOffloader,
                 block_cache: BlockCache | None):
        self.fs = fs
        self.config = config
        self.offloader = offloader
        self.block_cache = block_cache
        self.stats = DbStats()
        self.levels: list[list[Table]] = [[] for _ in range(config.levels)]
        self.l0_cache = L0Cache(config.l0_cache_bytes if config.log_recycling else 0)
        self.imms: list[MemTable] = []
        self._lock = threading.RLock()
        self._job_lock = threading.RLock()
        self._work = threading.Condition(self._lock)
        self._cursor: dict[int, bytes] = {}
        self.seq = 0
        self.persisted_seq = 0
        self.flushed_log = 0
        self.wal_released_up_to = 0
        self.next_file = 1
        self.manifest: ManifestLog | None = None
        self.mem: MemTable | None = None
        self.wal: WalWriter | None = None
        self._wal_inos: dict[int, int] = {}
        self._worker: threading.Thread | None = None
        self._closing = False
        self.closed = False

    # -- open / recovery ----------------------------------------------------------

    @classmethod
    def open(cls, fs: ExtentFS, config: DbConfig | None = None, offloader: TaskOffloader | None = None,
             block_cache: BlockCache | None = None) -> "OffloadDB":
        config = config or DbConfig()
        if offloader is None:
            offloader = TaskOffloader(fs, block_cache=block_cache)
        offloader.register_stub(LOG_RECYCLE, log_recycle_stub)
        offloader.register_stub(MERGE, merge_stub)
        if offloader.block_cache is None:
            offloader.block_cache = block_cache
        db = cls(fs, config, offloader, block_cache)
        with traffic("recovery"):
            db._recover()
        if config.background:
            db._worker = threading.Thread(target=db._worker_loop, name="offloaddb-bg", daemon=True)
            db._worker.start()
        else:
            db._run_jobs()
        return db

    def _file_number(self, name: str) -> int | None:
        prefix, _, num = name.partition("-")
        if prefix in ("wal", "sst") and num.isdigit():
            return int(num)
        return None

    def _recover(self) -> None:
        fs = self.fs
        if fs.exists(MANIFEST_NAME):
            self.manifest, state = ManifestLog.replay(fs)
        else:
            self.manifest, state = ManifestLog.create(fs), ManifestState()
        files = fs.list_files()
        numbers = [n for n in map(self._file_number, files) if n is not None]
        self.next_file = max([state.next_file, *(n + 1 for n in numbers)])
        self.flushed_log = state.flushed_log
        self.wal_released_up_to = state.wal_released_up_to
        self.persisted_seq = state.last_seq
        max_seq = state.last_seq

        wal_files = {self._file_number(n): ino for n, ino in files.items() if n.startswith("wal-")}
        backing = {m.wal for m in state.tables.values() if m.wal is not None}
        live_names = {MANIFEST_NAME}
        logs: dict[int, MemTable] = {}
        for log_no in sorted(wal_files):
            if log_no not in backing and log_no <= state.flushed_log:
                continue
            ino = wal_files[log_no]
            records, end = scan_records(read_log(fs, ino), log_no)
            mem = MemTable(log_no, self.config.memtable_bytes)
            for r in records:
                mem.add(MemEntry(r.key, r.value, r.seq, r.op, r.offset))
                max_seq = max(max_seq, r.seq)
            if log_no not in backing and not records:
                continue
            if fs.stat(ino).size != end or fs.allocated_bytes(ino) > -(-end // fs.block_size) * fs.block_size:
                fs.set_size(ino, end)
                fs.release_tail(ino, end)
            mem.freeze()
            logs[log_no] = mem
            self._wal_inos[log_no] = ino
            live_names.add(wal_name(log_no))

        for meta in sorted(state.tables.values(), key=lambda m: m.id):
            if meta.wal is not None:
                mem = logs.get(meta.wal)
                if mem is None:
                    raise NotFoundError(f"log {meta.wal} backing table {meta.id} is missing")
                table = Table(meta, mem=mem)
                self.l0_cache.add(meta.id, mem)
            else:
                ino = fs.lookup(meta.name)
                size = fs.stat(ino).size
                if fs.allocated_bytes(ino) > -(-size // fs.block_size) * fs.block_size:
                    fs.release_tail(ino, size)
                table = Table(meta, ino=ino)
                live_names.add(meta.name)
            self.levels[meta.level].append(table)
        for level in range(1, len(self.levels)):
            self.levels[level].sort(key=lambda t: t.meta.smallest)

        for name, ino in files.items():
            if name not in live_names:
                self._delete_file(ino)

        self.seq = max_seq
        # logs that were written but never flushed become immutable MemTables again
        for log_no in sorted(logs):
            if log_no > state.flushed_log and log_no not in backing:
                self.imms.append(logs[log_no])
        self._new_wal()

    def _delete_file(self, ino: int) -> None:
        if self.block_cache is not None:
            self.block_cache.invalidate_runs((e.phys_start, e.length) for e in self.fs.extents(ino))
        self.fs.delete_file(ino)

    def _alloc_number(self) -> int:
        n = self.next_file
        self.next_file += 1
        return n

    def _new_wal(self) -> None:
        log_no = self._alloc_number()
        with traffic("wal"):
            ino = self.fs.create_file(wal_name(log_no))
            self.fs.preallocate(ino, self.config.memtable_bytes + self.fs.block_size)
        self._wal_inos[log_no] = ino
        self.mem = MemTable(log_no, self.config.memtable_bytes)
        self.wal = WalWriter(self.fs, ino, log_no, self.config.wal_sync, chunk=self.config.memtable_bytes)

    # -- writes -------------------------------------------------------------------

    def put(self, key: bytes, value: bytes) -> None:
        self._write(OP_PUT, key, value)

    def delete(self, key: bytes) -> None:
        self._write(OP_DELETE, key, b"")

    def _write(self, op: int, key: bytes, value: bytes) -> None:
        if len(key) > self.config.max_key_bytes or not key:
            raise ValueError(f"key must be 1..{self.config.max_key_bytes} bytes")
        if len(value) > self.config.max_value_bytes:
            raise ValueError(f"value exceeds {self.config.max_value_bytes} bytes")
        t0 = time.perf_counter()
        with self._lock:
            if self.closed:
                raise RuntimeError("db is closed")
            while self.config.background and len(self.imms) > self.config.max_immutables:
                self._work.wait()
            stalled = time.perf_counter() - t0
            seq = self.seq + 1
            with traffic("wal"):
                off = self.wal.append(seq, op, key, value)
            self.seq = seq
            self.mem.add(MemEntry(key, value, seq, op, off))
            self.stats.puts += 1
            rotated = self.mem.full
            if rotated:
                self._rotate()
        self.stats.stall_seconds += stalled
        if rotated and not self.config.background:
            t1 = time.perf_counter()
            self._run_jobs()
            self.stats.stall_seconds += time.perf_counter() - t1

    def _rotate(self) -> None:
        with traffic("wal"):
            self.wal.close()
        self.mem.freeze()
        self.imms.append(self.mem)
        self._new_wal()
        self._work.notify_all()

    @property
    def durable_seq(self) -> int:
        """Highest sequence number whose record is known to be on the volume."""
        wal = self.wal
        if wal is None:
            return self.seq
        if wal.durable_seq:
            return wal.durable_seq
        return self.mem.min_seq - 1 if len(self.mem) else self.seq

    def flush_active(self) -> None:
        """Force the active MemTable to become immutable and flush it."""
        with self._lock:
            if len(self.mem):
                self._rotate()
        self._run_jobs() if not self.config.background else self.wait_idle()

    # -- background work ---------------------------------------------------------------

    def _worker_loop(self) -> None:
        while True:
            with self._lock:
                while not self._closing and not self._has_work():
                    self._work.wait()
                if self._closing and not self._has_work():
                    return
            self._run_jobs()

    def _has_work(self) -> bool:
        return bool(self.imms) or self._pick_compaction() is not None

    def wait_idle(self) -> None:
        while True:
            with self._lock:
                if not self._has_work():
                    return
                if self._worker is None:
                    break
                self._work.notify_all()
            time.sleep(0.001)
        self._run_jobs()

    def _run_jobs(self) -> None:
        with self._job_lock:
            while True:
                with self._lock:
                    imm = self.imms[0] if self.imms else None
                if imm is not None:
                    self._flush(imm)
                    continue
                with self._lock:
                    level = self._pick_compaction()
                if level is None:
                    return
                self.compact(level)

    # -- flush ----------------------------------------------------------------------

    def _released_watermark(self) -> int:
        needed = [m.log_no for m in self.imms]
        needed.append(self.mem.log_no if self.mem is not None else self.next_file)
        needed += [t.meta.wal for t in self.levels[0] if t.meta.wal is not None]
        return min(needed) - 1

    def _unneeded_logs(self) -> list[int]:
        needed = {m.log_no for m in self.imms}
        if self.mem is not None:
            needed.add(self.mem.log_no)
        needed |= {t.meta.wal for t in self.levels[0] if t.meta.wal is not None}
        return [n for n in self._wal_inos if n not in needed]

    def _commit(self, edit: ManifestEdit) -> None:
        edit.next_file = self.next_file
        with traffic("manifest"):
            self.manifest.append(edit)
        if edit.last_seq is not None:
            self.persisted_seq = max(self.persisted_seq, edit.last_seq)

    def _drop_logs(self) -> None:
        for log_no in self._unneeded_logs():
            ino = self._wal_inos.pop(log_no)
            self._delete_file(ino)

    def _flush(self, imm: MemTable) -> SstMeta:
        cfg = self.config
        with self._lock:
            table_id = self._alloc_number()
            log_backed = cfg.log_recycling and self.l0_cache.fits(imm)
        if log_backed:
            meta = SstMeta(table_id, 0, imm.smallest, imm.largest, len(imm), imm.min_seq, imm.max_seq,
                           self._mem_table_size(imm), wal=imm.log_no)
            table = Table(meta, mem=imm)
            self.stats.log_backed_flushes += 1
        elif cfg.log_recycling:
            table = self._recycle(imm, table_id)
            self.stats.recycled_flushes += 1
        else:
            table = self._materialize_locally(imm, table_id)
            self.stats.local_flushes += 1
        with self._lock:
            self.imms.remove(imm)
            self.levels[0].append(table)
            if log_backed:
                self.l0_cache.add(table_id, imm)
            self.flushed_log = max(self.flushed_log, imm.log_no)
            self.wal_released_up_to = max(self.wal_released_up_to, self._released_watermark())
            self._commit(ManifestEdit([table.meta], [], self.flushed_log, self.wal_released_up_to,
                                      imm.max_seq))
            self._drop_logs()
            self.stats.flushes += 1
            self._work.notify_all()
        return table.meta

    def _mem_table_size(self, mem: MemTable) -> int:
        data = sum(entry_size(len(e.key), len(e.value)) for e in mem.entries())
        max_key = max((len(e.key) for e in mem.entries()), default=0)
        return table_reserve(data, len(mem), max_key, self.fs.block_size)

    def _wal_extents(self, log_no: int) -> tuple[list[FileExtent], int]:
        ino = self._wal_inos[log_no]
        size = self.fs.stat(ino).size
        return self.fs.file_extents(ino, 0, size), size

    def _recycle(self, imm: MemTable, table_id: int) -> Table:
        name = f"sst-{table_id:06d}"
        with traffic("flush_meta"):
            ino = self.fs.create_file(name)
            self.fs.preallocate(ino, self._mem_table_size(imm))
        out = self.fs.file_extents(ino)
        wal_ext, wal_len = self._wal_extents(imm.log_no)
        args = RecycleArgs(imm.log_no, wal_ext, wal_len, imm.offset_array(), out, self.fs.block_size)
        task = TaskSpec(LOG_RECYCLE, wal_ext, out, args.encode(), category="flush")
        result, site = self.offloader.run(task, _PLANS[self.config.flush_site])
        self.stats.sites[site] += 1
        props = unpack_props(result)[0]
        meta = SstMeta(table_id, 0, props.smallest, props.largest, props.entries, props.min_seq,
                       props.max_seq, self.fs.stat(ino).size)
        return Table(meta, ino=ino)

    def _materialize_locally(self, imm: MemTable, table_id: int) -> Table:
        data = build_table(((e.key, e.seq, e.op, e.value) for e in imm.entries()), self.fs.block_size)
        name = f"sst-{table_id:06d}"
        with traffic("flush"):
            ino = self.fs.create_file(name)
            self.fs.write(ino, 0, data)
        meta = SstMeta(table_id, 0, imm.smallest, imm.largest, len(imm), imm.min_seq, imm.max_seq, len(data))
        self.stats.sites["local"] += 1
        return Table(meta, ino=ino)

    # -- compaction ---------------------------------------------------------------

    def level_bytes(self, level: int) -> int:
        return sum(t.meta.size for t in self.levels[level])

    def _pick_compaction(self) -> int | None:
        l0 = [t for t in self.levels[0] if not t.compacting]
        if len(l0) > self.config.l0_trigger:
            return 0
        for level in range(1, self.config.max_level):
            if self.level_bytes(level) > self.config.level_budget(level):
                return level
        return None

    def _choose_victims(self, level: int) -> tuple[list[Table], list[Table]]:
        if level == 0:
            upper = [t for t in self.levels[0] if not t.compacting]
        else:
            tables = self.levels[level]
            cursor = self._cursor.get(level)
            pick = next((t for t in tables if cursor is None or t.meta.smallest > cursor), tables[0])
            self._cursor[level] = pick.meta.largest
            upper = [pick]
        lo = min(t.meta.smallest for t in upper)
        hi = max(t.meta.largest for t in upper)
        lower = [t for t in self.levels[level + 1] if t.meta.overlaps(lo, hi)]
        return upper, lower

    def compact(self, level: int) -> list[SstMeta]:
        """Merge ``level`` into ``level + 1``; returns the metas of the new tables."""
        with self._job_lock:
            return self._compact(level)

    def _compact(self, level: int) -> list[SstMeta]:
        with self._lock:
            if level == 0 and not self.levels[0] or level > 0 and not self.levels[level]:
                return []
            upper, lower = self._choose_victims(level)
            victims = upper + lower
            for t in victims:
                t.compacting = True
        try:
            slack_files = 0
            while True:
                try:
                    return self._compact_once(level, victims, slack_files)
                except TaskFailedError:
                    # outputs did not fit (fragmentation): reserve more and retry
                    slack_files += 1
                    self.stats.compaction_retries += 1
                    if slack_files > 4:
                        raise
        finally:
            for t in victims:
                t.compacting = False

    def _compact_once(self, level: int, victims: list[Table], slack_files: int) -> list[SstMeta]:
        cfg = self.config
        bs = self.fs.block_size
        out_level = level + 1
        total = sum(t.meta.size for t in victims)
        k = max(1, -(-total // cfg.sst_target_bytes)) + slack_files
        inputs, read_ext = [], []
        for t in victims:
            if t.meta.wal is not None:
                ext, length = self._wal_extents(t.meta.wal)
                inputs.append(MergeInput(KIND_WAL, ext, length, t.meta.wal, t.mem.offset_array()))
            else:
                length = self.fs.stat(t.ino).size
                ext = self.fs.file_extents(t.ino, 0, length)
                inputs.append(MergeInput(KIND_SST, ext, length))
            read_ext += ext
        outputs, out_files, write_ext = [], [], []
        with self._lock, traffic("compaction_meta"):
            left = total
            for i in range(k):
                share = min(cfg.sst_target_bytes, left) if i < k - 1 else max(left, 0)
                left -= share
                reserve = share + (k + slack_files) * bs if i == k - 1 else share + bs
                table_id = self._alloc_number()
                ino = self.fs.create_file(f"sst-{table_id:06d}")
                self.fs.preallocate(ino, reserve)
                ext = self.fs.file_extents(ino)
                outputs.append(MergeOutput(ext, self.fs.allocated_bytes(ino)))
                out_files.append((table_id, ino))
                write_ext += ext
        args = MergeArgs(inputs, outputs, out_level == cfg.max_level, bs, cfg.sst_target_bytes)
        task = TaskSpec(MERGE, read_ext, write_ext, args.encode(), category="compaction")
        try:
            result, site = self.offloader.run(task, _PLANS[cfg.compaction_site(level)])
        except TaskFailedError:
            with self._lock:
                for _, ino in out_files:
                    self._delete_file(ino)
            raise
        self.stats.sites[site] += 1
        props = unpack_props(result)
        with self._lock:
            added, empty = [], []
            for (table_id, ino), p in zip(out_files, props):
                if p.entries:
                    meta = SstMeta(table_id, out_level, p.smallest, p.largest, p.entries, p.min_seq,
                                   p.max_seq, self.fs.stat(ino).size)
                    added.append(Table(meta, ino=ino))
                else:
                    empty.append(ino)
            victim_ids = {t.id for t in victims}
            for lvl in (level, out_level):
                self.levels[lvl] = [t for t in self.levels[lvl] if t.id not in victim_ids]
            self.levels[out_level] = sorted(self.levels[out_level] + added, key=lambda t: t.meta.smallest)
            for t in victims:
                self.l0_cache.evict(t.id)
            self.wal_released_up_to = max(self.wal_released_up_to, self._released_watermark())
            self._commit(ManifestEdit([t.meta for t in added], sorted(victim_ids), None,
                                      self.wal_released_up_to, None))
            with traffic("compaction_meta"):
                for t in victims:
                    if t.ino is not None:
                        self._delete_file(t.ino)
                for ino in empty:
                    self._delete_file(ino)
                self._drop_logs()
            self.stats.compactions += 1
            self._work.notify_all()
        return [t.meta for t in added]

    def compact_all(self) -> None:
        """Flush everything and push data down until no level is over budget."""
        self.flush_active()
        while True:
            with self._lock:
                level = 0 if self.levels[0] else self._pick_compaction()
            if level is None:
                return
            self.compact(level)

    # -- reads ------------------------------------------------------------------------

    def _runs_for(self, ino: int) -> list[tuple[int, int, int]]:
        bs = self.fs.block_size
        return [(e.logical_offset // bs, e.phys_start, e.length) for e in self.fs.extents(ino)]

    def _reader(self, table: Table) -> SstReader:
        if table.reader is None:
            ino = table.ino
            table.runs = self._runs_for(ino)
            table.reader = SstReader(table.meta.size, lambda off, n: self.fs.read(ino, off, n))
        return table.reader

    def _read_chunk(self, table: Table, off: int, n: int) -> bytes:
        self.stats.table_reads += 1
        if self.block_cache is None:
            return self.fs.read(table.ino, off, n)
        bs = self.fs.block_size
        b0, b1 = off // bs, -(-(off + n) // bs)
        parts = []
        for lb, phys, cnt in table.runs:
            s, e = max(b0, lb), min(b1, lb + cnt)
            if s < e:
                parts.append(self.block_cache.read_phys(self.fs.volume, phys + (s - lb), e - s))
        data = b"".join(parts)
        start = off - b0 * bs
        return data[start:start + n]

    def _table_get(self, table: Table, key: bytes):
        if table.mem is not None:
            e = table.mem.get(key)
            return None if e is None else (e.seq, e.op, e.value)
        if key < table.meta.smallest or key > table.meta.largest:
            return None
        reader = self._reader(table)
        return reader.get(key, lambda off, n: self._read_chunk(table, off, n))

    def get(self, key: bytes) -> bytes | None:
        with self._lock, traffic("read"):
            self.stats.gets += 1
            e = self.mem.get(key)
            if e is not None:
                return None if e.op == OP_DELETE else e.value
            for imm in reversed(self.imms):
                e = imm.get(key)
                if e is not None:
                    return None if e.op == OP_DELETE else e.value
            for table in reversed(self.levels[0]):
                hit = self._table_get(table, key)
                if hit is not None:
                    return None if hit[1] == OP_DELETE else hit[2]
            for level in range(1, len(self.levels)):
                tables = self.levels[level]
                i = bisect.bisect_left([t.meta.largest for t in tables], key)
                if i < len(tables) and tables[i].meta.smallest <= key:
                    hit = self._table_get(tables[i], key)
                    if hit is not None:
                        return None if hit[1] == OP_DELETE else hit[2]
            return None

    def _table_entries(self, table: Table):
        if table.mem is not None:
            return [(e.key, e.seq, e.op, e.value) for e in table.mem.entries()]
        return self._reader(table).entries()

    def scan(self, start_key: bytes = b"", limit: int | None = None) -> list[tuple[bytes, bytes]]:
        with self._lock, traffic("read"):
            sources = [[(e.key, e.seq, e.op, e.value) for e in self.mem.entries() if e.key >= start_key]]
            for imm in self.imms:
                sources.append([(e.key, e.seq, e.op, e.value) for e in imm.entries() if e.key >= start_key])
            for level in self.levels:
                for t in level:
                    if t.meta.largest >= start_key:
                        sources.append([x for x in self._table_entries(t) if x[0] >= start_key])
        out = []
        last = None
        for key, seq, op, value in heapq.merge(*sources, key=lambda e: (e[0], -e[1])):
            if key == last:
                continue
            last = key
            if op == OP_DELETE:
                continue
            out.append((key, value))
            if limit is not None and len(out) >= limit:
                break
        return out

    # -- introspection ---------------------------------------------------------------

    def live_tables(self) -> list[SstMeta]:
        with self._lock:
            return [t.meta for level in self.levels for t in level]

    def check_levels(self) -> None:
        """Levels >= 1 must hold pairwise disjoint key ranges."""
        for level in range(1, len(self.levels)):
            tables = sorted(self.levels[level], key=lambda t: t.meta.smallest)
            for a, b in zip(tables, tables[1:]):
                if a.meta.largest >= b.meta.smallest:
                    raise AssertionError(f"L{level}: tables {a.id} and {b.id} overlap")

    def referenced_files(self) -> set[str]:
        with self._lock:
            names = {MANIFEST_NAME}
            names |= {wal_name(n) for n in self._wal_inos}
            names |= {t.meta.name for level in self.levels for t in level if t.ino is not None}
            return names

    def close(self) -> None:
        if self.closed:
            return
        if self._worker is not None:
            with self._lock:
                self._closing = True
                self._work.notify_all()
            self._worker.join()
        with self._lock, traffic("wal"):
            self.wal.flush_tail()
            self.closed = True
