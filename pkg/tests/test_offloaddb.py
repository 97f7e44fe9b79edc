import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from blockoffload.errors import TaskFailedError
from blockoffload.offloaddb import BlockCache, DbConfig, OffloadDB
from blockoffload.offloaddb import db as dbmod
from conftest import make_fs


def small_config(**kw) -> DbConfig:
    base = dict(memtable_bytes=4096, sst_target_bytes=8192, l0_trigger=2, levels=3,
                level1_bytes=16384, level_multiplier=4, flush_site="local",
                default_compaction_site="local", l0_cache_bytes=8192)
    base.update(kw)
    return DbConfig(**base)


def fill(db, n, seed=0, value_len=200):
    rng = random.Random(seed)
    model = {}
    for i in range(n):
        k = b"k%05d" % rng.randrange(n)
        v = rng.randbytes(value_len)
        db.put(k, v)
        model[k] = v
    return model


ops = st.lists(
    st.tuples(st.sampled_from(["put", "put", "put", "delete", "get"]),
              st.integers(0, 60), st.binary(min_size=0, max_size=300)),
    min_size=1, max_size=250)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(ops)
def test_matches_dict_model(trace):
    db = OffloadDB.open(make_fs(2048), small_config())
    model = {}
    for kind, k, v in trace:
        key = b"key%03d" % k
        if kind == "put":
            db.put(key, v)
            model[key] = v
        elif kind == "delete":
            db.delete(key)
            model.pop(key, None)
        else:
            assert db.get(key) == model.get(key)
    assert db.scan() == sorted(model.items())
    db.compact_all()
    db.check_levels()
    assert db.scan() == sorted(model.items())
    for key, v in model.items():
        assert db.get(key) == v


def test_scan_start_and_limit():
    db = OffloadDB.open(make_fs(), small_config())
    model = fill(db, 300)
    keys = sorted(model)
    start = keys[100]
    got = db.scan(start, 10)
    assert got == [(k, model[k]) for k in keys[100:110]]


def test_reopen_recovers_everything():
    fs = make_fs()
    db = OffloadDB.open(fs, small_config())
    model = fill(db, 500)
    db.delete(next(iter(model)))
    model.pop(next(iter(model)))
    db.close()
    fs.sync()
    db2 = OffloadDB.open(fs, small_config())
    assert db2.scan() == sorted(model.items())
    assert set(fs.list_files()) == db2.referenced_files()


def test_log_backed_flush_sends_no_table_bytes():
    db = OffloadDB.open(make_fs(), small_config(l0_cache_bytes=1 << 20, l0_trigger=100))
    fill(db, 200)
    db.flush_active()
    assert db.stats.flushes > 0
    assert db.stats.log_backed_flushes == db.stats.flushes
    assert all(t.mem is not None for t in db.levels[0])
    assert not any(name.startswith("sst-") for name in db.fs.list_files())


def test_recycled_flush_when_l0_cache_full():
    db = OffloadDB.open(make_fs(), small_config(l0_cache_bytes=0))
    model = fill(db, 200)
    db.flush_active()
    assert db.stats.recycled_flushes == db.stats.flushes > 0
    assert db.stats.log_backed_flushes == 0
    assert db.scan() == sorted(model.items())


def test_local_flush_without_log_recycling():
    db = OffloadDB.open(make_fs(), small_config(log_recycling=False))
    model = fill(db, 200)
    db.flush_active()
    assert db.stats.local_flushes == db.stats.flushes > 0
    assert db.scan() == sorted(model.items())


def test_l0_cache_serves_reads_without_table_io():
    db = OffloadDB.open(make_fs(), small_config(l0_cache_bytes=1 << 20, l0_trigger=100),
                        block_cache=BlockCache(64))
    model = fill(db, 200)
    db.flush_active()
    before = db.stats.table_reads
    for k, v in model.items():
        assert db.get(k) == v
    assert db.stats.table_reads == before


def test_compaction_runs_and_levels_stay_disjoint():
    db = OffloadDB.open(make_fs(), small_config())
    model = fill(db, 1500, seed=3)
    db.compact_all()
    assert db.stats.compactions > 0
    db.check_levels()
    assert db.scan() == sorted(model.items())
    assert set(db.fs.list_files()) == db.referenced_files()


def test_obsolete_logs_are_deleted():
    db = OffloadDB.open(make_fs(), small_config())
    fill(db, 1500)
    db.compact_all()
    wals = [n for n in db.fs.list_files() if n.startswith("wal-")]
    assert wals == [dbmod.wal_name(db.mem.log_no)]


def test_compaction_retries_with_more_slack(monkeypatch):
    real = OffloadDB._compact_once
    calls = []

    def flaky(self, level, victims, slack_files):
        calls.append(slack_files)
        if slack_files < 2:
            raise TaskFailedError("outputs did not fit")
        return real(self, level, victims, slack_files)

    monkeypatch.setattr(OffloadDB, "_compact_once", flaky)
    db = OffloadDB.open(make_fs(), small_config())
    model = fill(db, 400)
    db.compact_all()
    assert calls[:3] == [0, 1, 2]
    assert db.stats.compaction_retries >= 2
    assert db.scan() == sorted(model.items())


def test_compaction_gives_up_after_bounded_retries(monkeypatch):
    def always(self, level, victims, slack_files):
        raise TaskFailedError("never fits")

    monkeypatch.setattr(OffloadDB, "_compact_once", always)
    db = OffloadDB.open(make_fs(), small_config(l0_trigger=100))
    fill(db, 400)
    with pytest.raises(TaskFailedError):
        db.compact_all()
    assert db.stats.compaction_retries == 5


def test_background_mode_matches_model():
    db = OffloadDB.open(make_fs(), small_config(background=True))
    model = fill(db, 1200, seed=9)
    db.wait_idle()
    assert db.scan() == sorted(model.items())
    db.close()
    assert db.closed


def test_offloaded_sites_are_counted(cluster):
    init = cluster.new_initiator(4096)
    cfg = small_config(flush_site="target", default_compaction_site="target",
                       offload_levels={"L1-L2": "peer"}, l0_cache_bytes=0)
    db = OffloadDB.open(init.fs, cfg, init.offloader)
    model = fill(db, 1500)
    db.compact_all()
    assert db.stats.sites["target"] > 0
    assert db.stats.sites["local"] == 0
    assert db.scan() == sorted(model.items())


def test_rejects_bad_keys():
    db = OffloadDB.open(make_fs(), small_config())
    with pytest.raises(ValueError):
        db.put(b"", b"x")
    with pytest.raises(ValueError):
        db.put(b"x" * 2000, b"x")


def test_config_parse():
    cfg = DbConfig.parse("memtable_bytes = 1024\nlog_recycling = false\n"
                         "offload_levels = L0-L1:target, L1-L2:local  # mixed\n")
    assert cfg.memtable_bytes == 1024 and cfg.log_recycling is False
    assert cfg.compaction_site(0) == "target" and cfg.compaction_site(1) == "local"
    assert cfg.compaction_site(2) == "target"
    with pytest.raises(ValueError):
        DbConfig.parse("nonsense = 1")
    with pytest.raises(ValueError):
        DbConfig(flush_site="moon")


def test_block_cache_fills_on_read_and_optionally_on_write():
    fs = make_fs()
    vol = fs.volume
    cold = BlockCache(8)
    assert 100 not in cold
    cold.read_phys(vol, 100, 2)
    assert 100 in cold and 101 in cold and cold.fg_misses == 2
    cold.read_phys(vol, 100, 1)
    assert cold.fg_hits == 1
    cold.invalidate_runs([(100, 2)])
    assert len(cold) == 0
    warm = BlockCache(2, cache_writes=True)
    warm.fill_phys(10, bytes(3 * 4096))
    assert 10 not in warm and 11 in warm and 12 in warm
