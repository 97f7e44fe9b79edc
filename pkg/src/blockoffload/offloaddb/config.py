"""DB configuration: dataclass defaults plus a ``key=value`` file format."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

SITES = ("local", "target", "peer")


@dataclass
class DbConfig:
    memtable_bytes: int = 64 << 10
    sst_target_bytes: int = 256 << 10
    l0_trigger: int = 10
    levels: int = 5
    level1_bytes: int = 1 << 20
    level_multiplier: int = 10
    wal_sync: str = "lazy"  # lazy | each
    log_recycling: bool = True
    l0_cache_bytes: int = 3 << 20
    flush_site: str = "target"
    # compaction site per source level: "L0-L1" -> site
    offload_levels: dict[str, str] = field(default_factory=dict)
    default_compaction_site: str = "target"
    max_key_bytes: int = 1024
    max_value_bytes: int = 1 << 20
    max_immutables: int = 2
    background: bool = False

    def __post_init__(self):
        if self.wal_sync not in ("lazy", "each"):
            raise ValueError("wal_sync must be lazy or each")
        if self.levels < 2:
            raise ValueError("need at least two levels")
        for site in [self.flush_site, self.default_compaction_site, *self.offload_levels.values()]:
            if site not in SITES:
                raise ValueError(f"unknown site {site!r}")

    @property
    def max_level(self) -> int:
        return self.levels - 1

    def level_budget(self, level: int) -> int:
        return self.level1_bytes * self.level_multiplier ** (level - 1)

    def compaction_site(self, level: int) -> str:
        return self.offload_levels.get(f"L{level}-L{level + 1}", self.default_compaction_site)

    @classmethod
    def parse(cls, text: str) -> "DbConfig":
        known = {f.name: f for f in fields(cls)}
        kw: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ValueError(f"bad db config line: {raw!r}")
            if key == "offload_levels":
                kw[key] = parse_offload_levels(value)
            elif known[key].type in ("bool", bool):
                kw[key] = value.lower() in ("1", "true", "yes", "on")
            elif known[key].type in ("int", int):
                kw[key] = int(value)
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "DbConfig":
        with open(path) as fh:
            return cls.parse(fh.read())


def parse_offload_levels(text: str) -> dict[str, str]:
    """``"L0-L1:target,L1-L2:local"`` -> ``{"L0-L1": "target", "L1-L2": "local"}``."""
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        pair, _, site = item.partition(":")
        if not site:
            raise ValueError(f"offload level {item!r} lacks a site")
        out[pair.strip()] = site.strip()
    return out
