"""One CSV row per experiment configuration."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

CSV_HEADER = ("experiment,config,seed,throughput_ops,lat_p50_us,lat_p99_us,tx_bytes,rx_bytes,"
              "offcache_hit,blockcache_hit,site_local,site_target,site_peer,stall_ms")


@dataclass
class MetricsRow:
    experiment: str
    config: str
    seed: int
    throughput_ops: float = 0.0
    lat_p50_us: float = 0.0
    lat_p99_us: float = 0.0
    tx_bytes: int = 0
    rx_bytes: int = 0
    offcache_hit: float = 0.0
    blockcache_hit: float = 0.0
    site_local: int = 0
    site_target: int = 0
    site_peer: int = 0
    stall_ms: float = 0.0

    def values(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        return out

    def deterministic(self) -> dict:
        """The columns that must not depend on timing."""
        d = asdict(self)
        for key in ("throughput_ops", "lat_p50_us", "lat_p99_us", "stall_ms"):
            d.pop(key)
        return d


assert ",".join(f.name for f in fields(MetricsRow)) == CSV_HEADER


def to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER.split(","))
    for r in rows:
        w.writerow(r.values())
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
