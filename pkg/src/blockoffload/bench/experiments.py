"""Experiment drivers; each returns one :class:`MetricsRow` per configuration."""
from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, fields, replace

from blockoffload.bench.fio import fio_like
from blockoffload.bench.metrics import MetricsRow
from blockoffload.bench.workload import RunResult, preset, run_workload
from blockoffload.cluster import Cluster, Initiator
from blockoffload.offload_engine import EngineConfig
from blockoffload.offloaddb import BlockCache, DbConfig, OffloadDB
from blockoffload.offloaddb.config import parse_offload_levels
from blockoffload.offloadprep import PrepBatch, preprocess_batch
from blockoffload.transport import RemoteVolume, connect
from blockoffload.volume import VolumeGeometry


@dataclass
class BenchConfig:
    # workload
    workload: str = "A"
    record_count: int = 2000
    operation_count: int = 4000
    key_len: int = 24
    value_len: int = 1024
    distribution: str = "uniform"
    threads: int = 1
    # volume and caches
    block_count: int = 32768
    block_cache_blocks: int = 512
    cache_writes: bool = False
    offcache_bytes: int = 64 << 20
    link_latency_us: float = 0.0
    transport: str = "local"  # local | tcp
    # db
    memtable_bytes: int = 64 << 10
    sst_target_bytes: int = 256 << 10
    l0_trigger: int = 4
    levels: int = 4
    level1_bytes: int = 1 << 20
    l0_cache_bytes: int = 3 << 20
    log_recycling: bool = True
    flush_site: str = "target"
    compaction_site: str = "target"
    offload_levels: str = ""
    # engine
    policy: str = "accept_all"
    threshold: float = 0.8
    token_count: int = 4
    token_ttl_ms: int = 1000
    executor_slots: int = 2
    # experiment-specific
    initiators: str = "1,2,4,8"
    policies: str = "accept_all,cpu_threshold,token"
    io_sizes: str = "4096,16384,131072"
    fio_ops: int = 500
    windows: int = 4
    prep_items: int = 64
    prep_file_bytes: int = 32768
    prep_splits: str = "1/0/0,0.5/0.25/0.25,0.5/0/0.5,0/0/1"
    transform_id: int = 0

    @classmethod
    def parse(cls, text: str) -> "BenchConfig":
        known = {f.name: f for f in fields(cls)}
        kw: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ValueError(f"bad bench config line: {raw!r}")
            kind = known[key].type
            if kind in ("bool", bool):
                kw[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind in ("int", int):
                kw[key] = int(value)
            elif kind in ("float", float):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "BenchConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def db_config(self, **overrides) -> DbConfig:
        base = dict(
            memtable_bytes=self.memtable_bytes, sst_target_bytes=self.sst_target_bytes,
            l0_trigger=self.l0_trigger, levels=self.levels, level1_bytes=self.level1_bytes,
            l0_cache_bytes=self.l0_cache_bytes, log_recycling=self.log_recycling,
            flush_site=self.flush_site, default_compaction_site=self.compaction_site,
            offload_levels=parse_offload_levels(self.offload_levels),
            max_key_bytes=max(self.key_len, 64),
        )
        return DbConfig(**{**base, **overrides})

    def engine_config(self, **overrides) -> EngineConfig:
        return replace(EngineConfig(self.policy, self.threshold, self.token_count, self.token_ttl_ms,
                                    self.offcache_bytes, self.executor_slots), **overrides)

    def spec(self, name: str, seed: int, **overrides) -> WorkloadSpec:
        kw = dict(record_count=self.record_count, operation_count=self.operation_count,
                  key_len=self.key_len, value_len=self.value_len, distribution=self.distribution,
                  threads=self.threads, seed=seed)
        kw.update(overrides)
        return preset(name, **kw)


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_cluster(cfg: BenchConfig, engine_cfg: EngineConfig | None = None) -> Cluster:
    ecfg = engine_cfg or cfg.engine_config()
    cluster = Cluster.build(ecfg.make_policy(), ecfg.cache_capacity_bytes, ecfg.executor_slots or 2)
    cluster.latency_us = cfg.link_latency_us
    if cfg.transport == "tcp":
        cluster.serve_tcp()
    elif cfg.transport != "local":
        raise ValueError(f"unknown transport {cfg.transport!r}")
    return cluster


@dataclass
class DbNode:
    """One initiator running a DB, with its own block cache."""

    initiator: Initiator
    db: OffloadDB
    cache: BlockCache

    @classmethod
    def create(cls, cluster: Cluster, cfg: BenchConfig, db_cfg: DbConfig) -> "DbNode":
        init = cluster.new_initiator(block_count=cfg.block_count)
        cache = BlockCache(cfg.block_cache_blocks, cache_writes=cfg.cache_writes)
        db = OffloadDB.open(init.fs, db_cfg, init.offloader, cache)
        return cls(init, db, cache)

    def tx_rx(self) -> tuple[int, int]:
        tx, rx = self.initiator.profile.tx_bytes, self.initiator.profile.rx_bytes
        if self.initiator.peer_profile is not None:
            tx += self.initiator.peer_profile.tx_bytes
            rx += self.initiator.peer_profile.rx_bytes
        return tx, rx


def _row(experiment: str, config: str, seed: int, result: RunResult, nodes: list[DbNode],
         cluster: Cluster, wall: float | None = None) -> MetricsRow:
    sites = {"local": 0, "target": 0, "peer": 0}
    tx = rx = 0
    stall = 0.0
    for n in nodes:
        t, r = n.tx_rx()
        tx, rx = tx + t, rx + r
        stall += n.db.stats.stall_seconds
        for k, v in n.initiator.offloader.site_counts.items():
            sites[k] += v
    fg_hits = sum(n.cache.fg_hits for n in nodes)
    fg_total = fg_hits + sum(n.cache.fg_misses for n in nodes)
    seconds = wall if wall is not None else result.seconds
    return MetricsRow(
        experiment, config, seed,
        throughput_ops=result.ops / seconds if seconds > 0 else 0.0,
        lat_p50_us=result.percentile(50), lat_p99_us=result.percentile(99),
        tx_bytes=tx, rx_bytes=rx,
        offcache_hit=cluster.engine.cache.hit_ratio(),
        blockcache_hit=fg_hits / fg_total if fg_total else 0.0,
        site_local=sites["local"], site_target=sites["target"], site_peer=sites["peer"],
        stall_ms=stall * 1000,
    )


def _load_and_run(cfg: BenchConfig, seed: int, db_cfg: DbConfig, workload: str | None = None,
                  engine_cfg: EngineConfig | None = None) -> tuple[Cluster, DbNode, RunResult]:
    cluster = build_cluster(cfg, engine_cfg)
    node = DbNode.create(cluster, cfg, db_cfg)
    run_workload(node.db, cfg.spec("load", seed))
    node.cache.reset_stats()
    result = run_workload(node.db, cfg.spec(workload or cfg.workload, seed + 1))
    node.db.flush_active()
    return cluster, node, result


# -- experiments ----------------------------------------------------------------------


def exp_fio(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    rows = []
    for mode in ("randread", "randwrite"):
        for size in _ints(cfg.io_sizes):
            cluster = build_cluster(cfg)
            vol = cluster.add_volume(VolumeGeometry(4096, cfg.block_count))
            remote = RemoteVolume(connect(cluster.endpoint or cluster.service, cluster._profile()), vol.volume_id)
            rows.append(fio_like(remote, mode, size, seed=seed, ops=cfg.fio_ops))
            cluster.close()
    return rows


def exp_ycsb(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    cluster = build_cluster(cfg)
    node = DbNode.create(cluster, cfg, cfg.db_config())
    load = run_workload(node.db, cfg.spec("load", seed))
    rows = [_row("ycsb", "load", seed, load, [node], cluster)]
    node.cache.reset_stats()
    run = run_workload(node.db, cfg.spec(cfg.workload, seed + 1))
    rows.append(_row("ycsb", f"run-{cfg.workload}", seed, run, [node], cluster))
    cluster.close()
    return rows


def sweep_configs(levels: int) -> list[tuple[str, dict]]:
    """Local, then offloading L0-L1, L0-L2, ... up to all levels, then everything on the peer."""
    out = [("local", dict(flush_site="local", default_compaction_site="local"))]
    for top in range(1, levels):
        mapping = {f"L{i}-L{i + 1}": "target" for i in range(top)}
        name = "all-levels" if top == levels - 1 else f"L0-L{top}"
        out.append((name, dict(offload_levels=mapping, default_compaction_site="local")))
    out.append(("peer", dict(default_compaction_site="peer")))
    return out


def exp_offload_sweep(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    rows = []
    for name, overrides in sweep_configs(cfg.levels):
        cluster, node, result = _load_and_run(cfg, seed, cfg.db_config(**overrides))
        rows.append(_row("offload-sweep", name, seed, result, [node], cluster))
        cluster.close()
    return rows


def exp_scale_policy(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    """M initiators, each with its own volume and DB, sharing one target engine."""
    rows = []
    for policy in [p.strip() for p in cfg.policies.split(",") if p.strip()]:
        for m in _ints(cfg.initiators):
            cluster = build_cluster(cfg, cfg.engine_config(policy=policy))
            nodes = [DbNode.create(cluster, cfg, cfg.db_config()) for _ in range(m)]
            if policy == "token":
                cluster.engine.token_service(range(m))
                for n in nodes:
                    n.initiator.offloader.hold_token()
            for i, n in enumerate(nodes):
                run_workload(n.db, cfg.spec("load", seed + 100 * i))
            results: list[RunResult | None] = [None] * m

            def go(i: int) -> None:
                results[i] = run_workload(nodes[i].db, cfg.spec(cfg.workload, seed + 100 * i + 1))
                nodes[i].db.flush_active()

            t0 = time.perf_counter()
            threads = [threading.Thread(target=go, args=(i,)) for i in range(m)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            wall = time.perf_counter() - t0
            merged = RunResult(sum(r.ops for r in results), wall,
                               [x for r in results for x in r.latencies_us])
            rows.append(_row("scale-policy", f"{policy}:m={m}", seed, merged, nodes, cluster, wall))
            cluster.close()
    return rows


QUANTIFY_LADDER = [
    ("recycling-off/cache-off", dict(log_recycling=False, l0_cache_bytes=0)),
    ("recycling-on/cache-off", dict(log_recycling=True, l0_cache_bytes=0)),
    ("all-on", dict(log_recycling=True)),
]


def exp_quantify(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    rows = []
    for name, overrides in QUANTIFY_LADDER:
        cluster, node, result = _load_and_run(cfg, seed, cfg.db_config(**overrides), workload="write-only")
        rows.append(_row("quantify", name, seed, result, [node], cluster))
        cluster.close()
    return rows


def pollution_run(cfg: BenchConfig, seed: int, compaction_site: str) -> list[tuple[str, RunResult, float]]:
    """Load, then WR75 and WR25 in ``cfg.windows`` windows each; returns (label, result, hit ratio)."""
    cluster = build_cluster(cfg)
    node = DbNode.create(cluster, cfg, cfg.db_config(default_compaction_site=compaction_site,
                                                     flush_site=compaction_site))
    run_workload(node.db, cfg.spec("load", seed))
    out = []
    per_window = max(1, cfg.operation_count // cfg.windows)
    for phase in ("WR75", "WR25"):
        for w in range(cfg.windows):
            node.cache.reset_stats()
            res = run_workload(node.db, cfg.spec(phase, seed * 1000 + len(out) + 1, operation_count=per_window))
            out.append((f"{phase}:w{w}", res, node.cache.fg_hit_ratio()))
    cluster.close()
    return out


def exp_pollution(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    rows = []
    for label, site in (("no-offload", "local"), ("offload", "target")):
        for window, res, hit in pollution_run(cfg, seed, site):
            rows.append(MetricsRow("pollution", f"{label}:{window}", seed, throughput_ops=res.throughput,
                                   lat_p50_us=res.percentile(50), lat_p99_us=res.percentile(99),
                                   blockcache_hit=hit))
    return rows


def _splits(text: str) -> list[tuple[float, float, float]]:
    out = []
    for item in text.split(","):
        parts = [float(x) for x in item.strip().split("/")]
        if len(parts) != 3:
            raise ValueError(f"split {item!r} needs local/peer/target fractions")
        out.append(tuple(parts))
    return out


def exp_prep_split(cfg: BenchConfig, seed: int) -> list[MetricsRow]:
    # the Offload Cache is off for preprocessing
    cluster = build_cluster(cfg, cfg.engine_config(cache_capacity_bytes=0))
    init = cluster.new_initiator(block_count=cfg.block_count)
    rng = random.Random(seed)
    inos = []
    for i in range(cfg.prep_items):
        ino = init.fs.create_file(f"item-{i:04d}")
        init.fs.write(ino, 0, rng.randbytes(rng.randint(cfg.prep_file_bytes // 2, cfg.prep_file_bytes)))
        inos.append(ino)
    init.fs.sync()
    rows = []
    for split in _splits(cfg.prep_splits):
        tx0, rx0 = init.profile.tx_bytes, init.profile.rx_bytes
        ptx0, prx0 = init.peer_profile.tx_bytes, init.peer_profile.rx_bytes
        results, stats = preprocess_batch(init.offloader, PrepBatch(inos, cfg.transform_id, split, seed))
        lat = sorted(r.duration * 1e6 for r in results)
        pick = lambda q: lat[min(len(lat) - 1, int(q * len(lat)))] if lat else 0.0
        rows.append(MetricsRow(
            "prep-split", "/".join(f"{f:g}" for f in split), seed,
            throughput_ops=len(results) / stats.turnaround if stats.turnaround else 0.0,
            lat_p50_us=pick(0.5), lat_p99_us=pick(0.99),
            tx_bytes=init.profile.tx_bytes - tx0 + init.peer_profile.tx_bytes - ptx0,
            rx_bytes=init.profile.rx_bytes - rx0 + init.peer_profile.rx_bytes - prx0,
            site_local=stats.executed["local"], site_target=stats.executed["target"],
            site_peer=stats.executed["peer"],
        ))
    cluster.close()
    return rows


EXPERIMENTS = {
    "fio-like": exp_fio,
    "ycsb": exp_ycsb,
    "offload-sweep": exp_offload_sweep,
    "scale-policy": exp_scale_policy,
    "quantify": exp_quantify,
    "pollution": exp_pollution,
    "prep-split": exp_prep_split,
}


def run_experiment(name: str, cfg: BenchConfig | None = None, seed: int = 0) -> list[MetricsRow]:
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}") from None
    return fn(cfg or BenchConfig(), seed)
