"""Raw random block I/O against a volume, in the manner of a fio random job."""
from __future__ import annotations

import random
import time

from blockoffload.bench.metrics import MetricsRow
from blockoffload.volume import Volume


def fio_like(vol: Volume, mode: str, io_size: int = 4096, duration: float | None = None,
             seed: int = 0, ops: int | None = None, experiment: str = "fio-like") -> MetricsRow:
    """Issue aligned random reads or writes of ``io_size`` bytes.

    With ``ops`` the job is a fixed op count (reproducible byte counters);
    otherwise it runs for ``duration`` seconds.
    """
    if mode not in ("randread", "randwrite"):
        raise ValueError("mode must be randread or randwrite")
    bs = vol.block_size
    if io_size < bs or io_size % bs:
        raise ValueError(f"io_size must be a multiple of the block size {bs}")
    if ops is None and duration is None:
        raise ValueError("give a duration or an op count")
    count = io_size // bs
    slots = vol.block_count // count
    if slots < 1:
        raise ValueError("volume smaller than one I/O")
    rng = random.Random(seed)
    payload = rng.randbytes(io_size)
    profile = getattr(vol, "profile", None)
    tx0, rx0 = (profile.tx_bytes, profile.rx_bytes) if profile else (0, 0)
    lat: list[float] = []
    start = time.perf_counter()
    deadline = start + duration if duration is not None else float("inf")
    n = 0
    while (ops is None or n < ops) and time.perf_counter() < deadline:
        addr = rng.randrange(slots) * count
        t0 = time.perf_counter()
        if mode == "randread":
            vol.read_blocks(addr, count)
        else:
            vol.write_blocks(addr, payload)
        lat.append((time.perf_counter() - t0) * 1e6)
        n += 1
    elapsed = time.perf_counter() - start
    lat.sort()
    pick = lambda q: lat[min(len(lat) - 1, int(q * len(lat)))] if lat else 0.0
    return MetricsRow(
        experiment, f"{mode}-{io_size}", seed,
        throughput_ops=n / elapsed if elapsed > 0 else 0.0,
        lat_p50_us=pick(0.5), lat_p99_us=pick(0.99),
        tx_bytes=(profile.tx_bytes - tx0) if profile else 0,
        rx_bytes=(profile.rx_bytes - rx0) if profile else 0,
    )
