"""Block-addressable volumes.

A volume exposes ``read_blocks``/``write_blocks`` over fixed-size blocks. Three
backends share that surface: an in-memory sparse map, a file, and a remote
volume reached through a metered link (see :mod:`blockoffload.transport`).
There is deliberately no caching at this layer.
"""
from __future__ import annotations

import itertools
import os
import threading
from dataclasses import dataclass

from blockoffload.errors import (
    GeometryError,
    MisalignedError,
    OutOfRangeError,
    SimulatedCrash,
    VolumeError,
)

DEFAULT_BLOCK_SIZE = 4096

_volume_ids = itertools.count(1)


@dataclass(frozen=True)
class VolumeGeometry:
    block_size: int = DEFAULT_BLOCK_SIZE
    block_count: int = 1024

    def __post_init__(self):
        bs = self.block_size
        if bs < 512 or bs & (bs - 1):
            raise GeometryError(f"block_size {bs} must be a power of two >= 512")
        if self.block_count < 1:
            raise GeometryError("block_count must be >= 1")

    @property
    def capacity(self) -> int:
        return self.block_size * self.block_count


@dataclass
class VolumeStats:
    read_calls: int = 0
    write_calls: int = 0
    blocks_read: int = 0
    blocks_written: int = 0

    def snapshot(self) -> "VolumeStats":
        return VolumeStats(self.read_calls, self.write_calls, self.blocks_read, self.blocks_written)


class Volume:
    """Base class: range checks, counters, and the two I/O entry points."""

    def __init__(self, geometry: VolumeGeometry, volume_id: int | None = None):
        self.geometry = geometry
        self.volume_id = next(_volume_ids) if volume_id is None else volume_id
        self.stats = VolumeStats()
        self._stats_lock = threading.Lock()

    @property
    def block_size(self) -> int:
        return self.geometry.block_size

    @property
    def block_count(self) -> int:
        return self.geometry.block_count

    def _check_range(self, addr: int, count: int) -> None:
        if addr < 0 or count < 0 or addr + count > self.geometry.block_count:
            raise OutOfRangeError(
                f"blocks [{addr}, {addr + count}) outside volume of {self.geometry.block_count}"
            )

    def read_blocks(self, addr: int, count: int) -> bytes:
        self._check_range(addr, count)
        data = self._read(addr, count)
        with self._stats_lock:
            self.stats.read_calls += 1
            self.stats.blocks_read += count
        return data

    def write_blocks(self, addr: int, data: bytes) -> None:
        bs = self.geometry.block_size
        if len(data) % bs:
            raise MisalignedError(f"write of {len(data)} bytes is not a multiple of {bs}")
        count = len(data) // bs
        self._check_range(addr, count)
        self._write(addr, bytes(data))
        with self._stats_lock:
            self.stats.write_calls += 1
            self.stats.blocks_written += count

    def _read(self, addr: int, count: int) -> bytes:
        raise NotImplementedError

    def _write(self, addr: int, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemoryVolume(Volume):
    """Sparse in-memory volume; unwritten blocks read as zeros."""

    def __init__(self, geometry: VolumeGeometry, volume_id: int | None = None,
                 blocks: dict[int, bytes] | None = None):
        super().__init__(geometry, volume_id)
        self._blocks: dict[int, bytes] = dict(blocks) if blocks else {}
        self._zero = bytes(geometry.block_size)
        self._lock = threading.Lock()

    def _read(self, addr, count):
        get = self._blocks.get
        zero = self._zero
        with self._lock:
            if count == 1:
                return get(addr, zero)
            return b"".join([get(i, zero) for i in range(addr, addr + count)])

    def _write(self, addr, data):
        bs = self.geometry.block_size
        with self._lock:
            if len(data) == bs:
                self._blocks[addr] = data
                return
            for i in range(len(data) // bs):
                self._blocks[addr + i] = data[i * bs:(i + 1) * bs]

    def block_map(self) -> dict[int, bytes]:
        """Copy of the written blocks (block index -> contents)."""
        with self._lock:
            return dict(self._blocks)

    def clone(self, volume_id: int | None = None) -> "MemoryVolume":
        return MemoryVolume(self.geometry, self.volume_id if volume_id is None else volume_id,
                            self.block_map())


class FileVolume(Volume):
    """Volume backed by a regular file of exactly ``capacity`` bytes."""

    def __init__(self, path: str | os.PathLike, geometry: VolumeGeometry, create: bool = True,
                 volume_id: int | None = None):
        super().__init__(geometry, volume_id)
        self.path = os.fspath(path)
        flags = os.O_RDWR | (os.O_CREAT | os.O_TRUNC if create else 0)
        try:
            self._fd = os.open(self.path, flags, 0o644)
        except OSError as exc:
            raise VolumeError(f"backing {self.path!r} unavailable: {exc}") from exc
        if create:
            os.ftruncate(self._fd, geometry.capacity)
        elif os.fstat(self._fd).st_size != geometry.capacity:
            os.close(self._fd)
            raise GeometryError(f"{self.path!r} is not {geometry.capacity} bytes")

    def _read(self, addr, count):
        bs = self.geometry.block_size
        return os.pread(self._fd, count * bs, addr * bs)

    def _write(self, addr, data):
        os.pwrite(self._fd, data, addr * self.geometry.block_size)

    def flush(self) -> None:
        os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


def create_volume(backing: str | os.PathLike | None, geometry: VolumeGeometry) -> Volume:
    """Create a zero-filled volume. ``backing`` is ``None``/``"mem"`` or a file path."""
    if backing is None or backing in ("mem", ":memory:"):
        return MemoryVolume(geometry)
    return FileVolume(backing, geometry, create=True)


def open_volume(path: str | os.PathLike, block_size: int = DEFAULT_BLOCK_SIZE) -> FileVolume:
    size = os.path.getsize(path)
    if size % block_size:
        raise GeometryError(f"{path!r} size {size} is not a multiple of {block_size}")
    return FileVolume(path, VolumeGeometry(block_size, size // block_size), create=False)


class WrappedVolume(Volume):
    """Delegating wrapper that keeps the inner volume's identity and geometry."""

    def __init__(self, inner: Volume):
        super().__init__(inner.geometry, inner.volume_id)
        self.inner = inner

    def _read(self, addr, count):
        return self.inner.read_blocks(addr, count)

    def _write(self, addr, data):
        self.inner.write_blocks(addr, data)


class CrashingVolume(WrappedVolume):
    """Applies ``crash_after`` writes, then raises :class:`SimulatedCrash` forever.

    The write that exhausts the budget is applied before the exception, which
    models a crash immediately after that write completed.
    """

    def __init__(self, inner: Volume, crash_after: int):
        super().__init__(inner)
        self.crash_after = crash_after
        self.writes_done = 0
        self.crashed = False

    def _read(self, addr, count):
        if self.crashed:
            raise SimulatedCrash("volume is down")
        return super()._read(addr, count)

    def _write(self, addr, data):
        if self.crashed:
            raise SimulatedCrash("volume is down")
        super()._write(addr, data)
        self.writes_done += 1
        if self.writes_done >= self.crash_after:
            self.crashed = True
            raise SimulatedCrash(f"crash after write {self.writes_done}")


class RecordingVolume(WrappedVolume):
    """Logs every write as ``(addr, data)`` so crash points can be replayed offline."""

    def __init__(self, inner: Volume):
        super().__init__(inner)
        self.log: list[tuple[int, bytes]] = []

    def _write(self, addr, data):
        super()._write(addr, data)
        self.log.append((addr, data))


def apply_writes(blocks: dict[int, bytes], writes, block_size: int) -> None:
    """Apply logged ``(addr, data)`` writes to a block map in place."""
    for addr, data in writes:
        if len(data) == block_size:
            blocks[addr] = data
        else:
            for i in range(len(data) // block_size):
                blocks[addr + i] = data[i * block_size:(i + 1) * block_size]
