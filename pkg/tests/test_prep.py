import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockoffload import _kernels_py
from blockoffload.cluster import Cluster
from blockoffload.offload_engine import RejectAll
from blockoffload.offloadprep import TRANSFORMS, PrepBatch, preprocess_batch, transform
from blockoffload.volume import VolumeGeometry


def setup_items(policy=None, n=64, seed=5):
    cluster = Cluster.build(policy=policy, cache_capacity_bytes=0)
    vol = cluster.add_volume(VolumeGeometry(4096, 8192))
    init = cluster.attach(vol)
    rng = random.Random(seed)
    inos, contents = [], {}
    for i in range(n):
        ino = init.fs.create_file(f"item-{i:03d}")
        data = rng.randbytes(rng.randint(1, 20000))
        init.fs.write(ino, 0, data)
        inos.append(ino)
        contents[ino] = data
    init.fs.sync()
    return cluster, vol, init, inos, contents


def test_transform_is_deterministic_and_id_sensitive():
    data = bytes(range(256)) * 40
    assert transform(data, 0) == transform(data, 0)
    assert transform(data, 0) != transform(data, 1)
    assert transform(b"", 0)[1] == 0
    with pytest.raises(ValueError):
        transform(data, 99)


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=3000), st.sampled_from(sorted(TRANSFORMS)))
def test_compiled_transform_matches_python(data, tid):
    stride, window = TRANSFORMS[tid]
    assert transform(data, tid) == _kernels_py.transform_digest(data, stride, window)


def test_batch_validates_split():
    with pytest.raises(ValueError):
        PrepBatch([1, 2], split=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        PrepBatch([1], split=(1.0, 0.0))
    with pytest.raises(ValueError):
        PrepBatch([1], transform_id=42)


def test_assignment_follows_counts_and_seed():
    b = PrepBatch(list(range(64)), split=(0.5, 0.25, 0.25), seed=3)
    assert b.counts() == {"local": 32, "peer": 16, "target": 16}
    assert Counter(b.assignment().values()) == Counter(b.counts())
    assert b.assignment() == PrepBatch(list(range(64)), split=(0.5, 0.25, 0.25), seed=3).assignment()


def test_split_runs_on_planned_sites_with_same_digests():
    cluster, vol, init, inos, contents = setup_items()
    expected = {ino: transform(data, 0) for ino, data in contents.items()}
    for split in [(1.0, 0.0, 0.0), (0.5, 0.25, 0.25), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)]:
        results, stats = preprocess_batch(init.offloader, PrepBatch(inos, 0, split, seed=1))
        assert not stats.partial
        assert stats.executed == stats.planned
        assert {r.ino: (r.digest, r.output_len) for r in results} == expected
    cluster.close()


def test_prep_is_read_only():
    cluster, vol, init, inos, _ = setup_items(n=16)
    before = vol.stats.blocks_written
    preprocess_batch(init.offloader, PrepBatch(inos, 1, (0.4, 0.3, 0.3)))
    assert vol.stats.blocks_written == before
    cluster.close()


def test_rejected_items_fall_back_locally_with_one_round_trip_each():
    cluster, vol, init, inos, contents = setup_items(policy=RejectAll())
    prof = init.profile
    rt0 = prof.category_round_trips("prep")
    results, stats = preprocess_batch(init.offloader, PrepBatch(inos, 0, (0.0, 0.0, 1.0)))
    assert all(r.ok and r.site == "local" for r in results)
    assert prof.category_round_trips("prep") - rt0 == len(inos)
    assert {r.ino: r.digest for r in results} == {i: transform(d, 0)[0] for i, d in contents.items()}
    cluster.close()


def test_item_errors_are_reported_not_raised():
    cluster, vol, init, inos, _ = setup_items(n=4)
    results, stats = preprocess_batch(init.offloader, PrepBatch(inos + [9999], 0, (1.0, 0.0, 0.0)))
    assert stats.failures == 1 and stats.partial
    bad = [r for r in results if not r.ok]
    assert bad[0].ino == 9999
    cluster.close()
