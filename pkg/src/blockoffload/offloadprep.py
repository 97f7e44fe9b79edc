"""Read-only preprocessing of a batch of files, split across execution sites.

Each item is one file. The transform is a deterministic byte pipeline
(strided downsample, per-window reversal, checksum), so its digest depends
only on the file content and the transform id, never on where it ran.
"""
from __future__ import annotations

import random
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from blockoffload.kernels import transform_digest
from blockoffload.task_offloader import LOCAL, PEER, TARGET, SitePlan, TaskOffloader, TaskSpec, split_counts

TRANSFORM_STUB = "prep_transform"
PREP_CATEGORY = "prep"
SITES = (LOCAL, PEER, TARGET)

# transform id -> (stride, window)
TRANSFORMS: dict[int, tuple[int, int]] = {
    0: (2, 64),
    1: (4, 256),
    2: (1, 32),
    3: (8, 512),
}

_ARGS = struct.Struct("<IQ")
_RESULT = struct.Struct("<16sQ")


def transform(content: bytes, transform_id: int = 0) -> tuple[bytes, int]:
    """Return ``(digest, output_len)`` for ``content`` under ``transform_id``."""
    try:
        stride, window = TRANSFORMS[transform_id]
    except KeyError:
        raise ValueError(f"unknown transform id {transform_id}") from None
    return transform_digest(content, stride, window)


def transform_stub(ctx, args: bytes) -> bytes:
    """Offloadable stub: read the whole leased file and transform it."""
    transform_id, size = _ARGS.unpack(args)
    content = ctx.read_file(ctx.lease.read_set, 0, size) if size else b""
    digest, out_len = transform(content, transform_id)
    return _RESULT.pack(digest, out_len)


@dataclass
class PrepBatch:
    inos: list[int]
    transform_id: int = 0
    split: tuple[float, float, float] = (1.0, 0.0, 0.0)  # local, peer, target
    seed: int = 0

    def __post_init__(self):
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ValueError("split needs three non-negative fractions (local, peer, target)")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.split)}")
        if self.transform_id not in TRANSFORMS:
            raise ValueError(f"unknown transform id {self.transform_id}")

    def counts(self) -> dict[str, int]:
        return dict(zip(SITES, split_counts(len(self.inos), list(self.split))))

    def assignment(self) -> dict[int, str]:
        """Site for each item; a seeded shuffle of the apportioned site labels."""
        labels = [site for site, n in self.counts().items() for _ in range(n)]
        random.Random(self.seed).shuffle(labels)
        return dict(zip(self.inos, labels))


@dataclass
class TransformResult:
    ino: int
    digest: bytes
    output_len: int
    site: str
    duration: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class BatchStats:
    planned: dict[str, int] = field(default_factory=dict)
    executed: dict[str, int] = field(default_factory=dict)
    site_seconds: dict[str, float] = field(default_factory=dict)
    failures: int = 0

    @property
    def turnaround(self) -> float:
        """The batch is ready only when its slowest site is done."""
        return max(self.site_seconds.values(), default=0.0)

    @property
    def partial(self) -> bool:
        return self.failures > 0


_PLANS = {LOCAL: SitePlan.local(), TARGET: SitePlan.target(), PEER: SitePlan.peer()}


def _run_item(offloader: TaskOffloader, ino: int, site: str, transform_id: int) -> TransformResult:
    fs = offloader.fs
    t0 = time.perf_counter()
    try:
        size = fs.stat(ino).size
        task = TaskSpec(TRANSFORM_STUB, read_extents=fs.file_extents(ino), args=_ARGS.pack(transform_id, size),
                        local_fallback=transform_stub, category=PREP_CATEGORY)
        raw, used = offloader.run(task, _PLANS[site])
        digest, out_len = _RESULT.unpack(raw)
        return TransformResult(ino, digest, out_len, used, time.perf_counter() - t0)
    except Exception as exc:
        return TransformResult(ino, b"", 0, site, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")


def preprocess_batch(offloader: TaskOffloader, batch: PrepBatch,
                     workers: dict[str, int] | None = None) -> tuple[list[TransformResult], BatchStats]:
    """Transform every item of ``batch``; results come back sorted by ino.

    Items assigned to one site run on that site's own worker pool (4 threads
    each by default) and all sites proceed at the same time.
    """
    workers = {s: 4 for s in SITES} | dict(workers or {})
    plan = batch.assignment()
    by_site = {s: [ino for ino in batch.inos if plan[ino] == s] for s in SITES}
    stats = BatchStats(planned=batch.counts(), executed={s: 0 for s in SITES})

    def run_site(site: str) -> tuple[str, list[TransformResult], float]:
        t0 = time.perf_counter()
        with ThreadPoolExecutor(max_workers=max(1, workers[site])) as pool:
            out = list(pool.map(lambda ino: _run_item(offloader, ino, site, batch.transform_id), by_site[site]))
        return site, out, time.perf_counter() - t0

    active = [s for s in SITES if by_site[s]]
    results: list[TransformResult] = []
    with ThreadPoolExecutor(max_workers=max(1, len(active))) as outer:
        for site, out, seconds in outer.map(run_site, active):
            stats.site_seconds[site] = seconds
            results.extend(out)
    for r in results:
        if r.ok:
            stats.executed[r.site] += 1
        else:
            stats.failures += 1
    results.sort(key=lambda r: r.ino)
    return results, stats
