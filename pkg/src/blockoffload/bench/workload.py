"""YCSB-style key-value workloads: key choosers, op mixes and a runner."""
from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from typing import Iterator

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv64(value: int) -> int:
    h = _FNV_OFFSET
    for _ in range(8):
        h = ((h ^ (value & 0xFF)) * _FNV_PRIME) & _MASK
        value >>= 8
    return h


class ZipfianGenerator:
    """Power-law item chooser over ``[0, n)``, after Gray et al. as used by YCSB.

    Item 0 is the most popular. ``zeta(n, theta)`` is computed once up front.
    """

    def __init__(self, n: int, theta: float = 0.99, rng: random.Random | None = None):
        if n < 1:
            raise ValueError("need at least one item")
        if not 0 < theta < 1:
            raise ValueError("theta must be in (0, 1)")
        self.n = n
        self.theta = theta
        self.rng = rng or random.Random()
        self.zeta2 = 1 + 0.5 ** theta
        self.zetan = sum(1.0 / (i ** theta) for i in range(1, n + 1))
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self.zeta2 / self.zetan)

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < self.zeta2:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


class ScrambledZipfian:
    """Zipfian popularity spread over the key space by hashing the rank."""

    def __init__(self, n: int, theta: float = 0.99, rng: random.Random | None = None):
        self.n = n
        self.zipf = ZipfianGenerator(n, theta, rng)

    def next(self) -> int:
        return fnv64(self.zipf.next()) % self.n


class UniformGenerator:
    def __init__(self, n: int, rng: random.Random | None = None):
        self.n = n
        self.rng = rng or random.Random()

    def next(self) -> int:
        return self.rng.randrange(self.n)


@dataclass(frozen=True)
class Op:
    kind: str  # read | update | insert | scan
    key: bytes
    value: bytes | None = None
    scan_len: int = 0


@dataclass
class WorkloadSpec:
    phase: str = "run"  # load | run
    read: float = 0.5
    update: float = 0.5
    insert: float = 0.0
    scan: float = 0.0
    distribution: str = "uniform"  # uniform | zipfian
    theta: float = 0.99
    record_count: int = 10_000
    operation_count: int = 10_000
    key_len: int = 24
    value_len: int = 1024
    scan_len: int = 50
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.phase not in ("load", "run"):
            raise ValueError("phase must be load or run")
        mix = (self.read, self.update, self.insert, self.scan)
        if any(f < 0 for f in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"op mix must be non-negative and sum to 1, got {mix}")
        if self.distribution not in ("uniform", "zipfian"):
            raise ValueError("distribution must be uniform or zipfian")
        if self.key_len < 8:
            raise ValueError("keys need at least 8 bytes")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def key(self, index: int) -> bytes:
        digits = self.key_len - 4
        return b"user" + str(fnv64(index) % 10 ** digits).zfill(digits).encode()

    def ops(self) -> Iterator[Op]:
        """The op trace; fully determined by the spec and its seed."""
        rng = random.Random(self.seed)
        value = lambda: rng.randbytes(self.value_len)
        if self.phase == "load":
            for i in range(self.record_count):
                yield Op("insert", self.key(i), value())
            return
        chooser_rng = random.Random(self.seed ^ 0x5EED)
        if self.distribution == "zipfian":
            chooser = ScrambledZipfian(self.record_count, self.theta, chooser_rng)
        else:
            chooser = UniformGenerator(self.record_count, chooser_rng)
        inserted = self.record_count
        cuts = [self.read, self.read + self.update, self.read + self.update + self.insert]
        for _ in range(self.operation_count):
            u = rng.random()
            if u < cuts[0]:
                yield Op("read", self.key(chooser.next()))
            elif u < cuts[1]:
                yield Op("update", self.key(chooser.next()), value())
            elif u < cuts[2]:
                yield Op("insert", self.key(inserted), value())
                inserted += 1
            else:
                yield Op("scan", self.key(chooser.next()), scan_len=self.scan_len)


PRESETS: dict[str, dict] = {
    "load": dict(phase="load", read=0.0, update=1.0),
    "A": dict(read=0.5, update=0.5),
    "B": dict(read=0.95, update=0.05),
    "C": dict(read=1.0, update=0.0),
    "E": dict(read=0.0, update=0.0, insert=0.05, scan=0.95),
    "write-only": dict(read=0.0, update=0.0, insert=1.0),
    "WR75": dict(read=0.25, update=0.75),
    "WR25": dict(read=0.75, update=0.25),
}


def preset(name: str, **overrides) -> WorkloadSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}") from None
    return WorkloadSpec(**{**base, **overrides})


@dataclass
class RunResult:
    ops: int
    seconds: float
    latencies_us: list[float]
    reads_found: int = 0

    @property
    def throughput(self) -> float:
        return self.ops / self.seconds if self.seconds > 0 else 0.0

    def percentile(self, q: float) -> float:
        if not self.latencies_us:
            return 0.0
        lat = sorted(self.latencies_us)
        return lat[min(len(lat) - 1, int(q / 100 * len(lat)))]


def apply_op(db, op: Op) -> bool:
    if op.kind == "read":
        return db.get(op.key) is not None
    if op.kind == "scan":
        return bool(db.scan(op.key, op.scan_len))
    db.put(op.key, op.value)
    return False


def run_workload(db, spec: WorkloadSpec, on_op=None) -> RunResult:
    """Apply the trace to ``db``; with several threads ops are dealt round-robin."""
    trace = list(spec.ops())
    latencies: list[float] = [0.0] * len(trace)
    found = [0] * spec.threads
    lock = threading.Lock()

    def worker(tid: int) -> None:
        for i in range(tid, len(trace), spec.threads):
            t0 = time.perf_counter()
            hit = apply_op(db, trace[i])
            latencies[i] = (time.perf_counter() - t0) * 1e6
            found[tid] += hit
            if on_op is not None:
                with lock:
                    on_op(i, trace[i])

    t0 = time.perf_counter()
    if spec.threads == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(t,)) for t in range(spec.threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return RunResult(len(trace), time.perf_counter() - t0, latencies, sum(found))
