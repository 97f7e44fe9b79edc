import math

import pytest
from hypothesis import given, strategies as st

from blockoffload.errors import TaskFailedError, UnknownStubError
from blockoffload.offload_engine import RejectAll, TokenPolicy
from blockoffload.task_offloader import (
    LOCAL,
    PEER,
    TARGET,
    DirectClient,
    SitePlan,
    TaskOffloader,
    TaskSpec,
    split_counts,
)


def upper_stub(ctx, args):
    (src,) = ctx.lease.read_set
    data = ctx.read_file([src], 0, len(args) and int(args) or src.length * ctx.block_size)
    return data.upper()


def append_stub(ctx, args):
    ctx.write_file(ctx.lease.write_set, args)
    return b""


@pytest.fixture
def node(cluster):
    for name, fn in (("upper", upper_stub), ("append", append_stub)):
        cluster.engine.register_stub(name, fn)
        cluster.peer_engine.register_stub(name, fn)
    init = cluster.new_initiator(block_count=1024)
    ino = init.fs.create_file("doc")
    init.fs.write(ino, 0, b"hello offload")
    return cluster, init, ino


def _task(init, ino, name="upper", **kw):
    return TaskSpec(name, read_extents=init.fs.file_extents(ino), args=b"13", **kw)


@pytest.mark.parametrize("plan,site", [(SitePlan.target(), TARGET), (SitePlan.peer(), PEER),
                                       (SitePlan.local(), LOCAL)])
def test_every_site_gives_the_same_result(node, plan, site):
    cluster, init, ino = node
    init.offloader.register_stub("upper", upper_stub)
    result, used = init.offloader.run(_task(init, ino), plan)
    assert (result, used) == (b"HELLO OFFLOAD", site)
    assert init.fs.active_leases() == []


def test_rejection_falls_back_locally_after_one_round_trip(node):
    cluster, init, ino = node
    cluster.engine.set_policy(RejectAll())
    before = init.profile.category_round_trips("offload")
    result, used = init.offloader.run(_task(init, ino, local_fallback=upper_stub))
    assert (result, used) == (b"HELLO OFFLOAD", LOCAL)
    assert init.profile.category_round_trips("offload") - before == 1
    assert init.offloader.rejections == 1


def test_target_failure_falls_back_locally(node):
    cluster, init, ino = node

    def flaky(ctx, args):
        raise RuntimeError("target-only problem")

    cluster.engine.register_stub("flaky", flaky)
    result, used = init.offloader.run(_task(init, ino, "flaky", local_fallback=upper_stub))
    assert used == LOCAL and result == b"HELLO OFFLOAD"
    assert init.offloader.failures == 1


def test_unknown_stub_raises_and_releases_lease(node):
    cluster, init, ino = node
    with pytest.raises(UnknownStubError):
        init.offloader.run(_task(init, ino, "missing"))
    with pytest.raises(UnknownStubError):
        init.offloader.run(_task(init, ino, "missing"), SitePlan.local())
    assert init.fs.active_leases() == []


def test_local_stub_error_aborts_and_reclaims(node):
    cluster, init, ino = node
    out = init.fs.create_file("out")
    init.fs.preallocate(out, 8192)
    free0 = init.fs.space.free

    def broken(ctx, args):
        ctx.write_file(ctx.lease.write_set, b"partial")
        raise ValueError("oops")

    task = TaskSpec("x", write_extents=init.fs.file_extents(out), local_fallback=broken)
    with pytest.raises(TaskFailedError):
        init.offloader.run(task, SitePlan.local())
    assert init.fs.active_leases() == []
    assert init.fs.space.free == free0 + 2
    init.fs.check()


def test_offloaded_write_grows_file_and_frees_unused(node):
    cluster, init, ino = node
    out = init.fs.create_file("out")
    init.fs.preallocate(out, 3 * 4096)
    free0 = init.fs.space.free
    task = TaskSpec("append", write_extents=init.fs.file_extents(out), args=b"z" * 5000)
    _, used = init.offloader.run(task)
    assert used == TARGET
    assert init.fs.stat(out).size == 5000
    assert init.fs.read(out, 0, 5000) == b"z" * 5000
    assert init.fs.space.free == free0 + 1
    init.fs.check()


def test_token_session_gates_target(node):
    cluster, init, ino = node
    cluster.engine.set_policy(TokenPolicy(1, 60.0))
    cluster.engine.token_service([init.initiator_id, 99])
    session = init.offloader.hold_token()
    assert session.valid()
    _, used = init.offloader.run(_task(init, ino, local_fallback=upper_stub))
    assert used == TARGET
    session.release()
    assert cluster.engine.tokens.holders() == [99]
    _, used = init.offloader.run(_task(init, ino, local_fallback=upper_stub))
    assert used == LOCAL  # no token: never even asks the target to run it


def test_run_batch_split(node):
    cluster, init, ino = node
    tasks = [_task(init, ino) for _ in range(8)]
    out = init.offloader.run_batch(tasks, SitePlan.split(0.75))
    assert [s for _, s in out] == [TARGET] * 6 + [PEER] * 2


def test_direct_client_without_link(fs):
    from blockoffload.offload_engine import OffloadEngine
    engine = OffloadEngine([fs.volume])
    engine.register_stub("upper", upper_stub)
    ino = fs.create_file("d")
    fs.write(ino, 0, b"abc")
    off = TaskOffloader(fs, DirectClient(engine))
    assert off.run(TaskSpec("upper", fs.file_extents(ino), args=b"3")) == (b"ABC", TARGET)


def test_site_plan_validation():
    with pytest.raises(ValueError):
        SitePlan("moon")
    with pytest.raises(ValueError):
        SitePlan.split(1.5)


@given(st.integers(0, 500), st.lists(st.integers(0, 100), min_size=1, max_size=6).filter(lambda f: sum(f) > 0))
def test_split_counts_is_a_fair_apportionment(n, weights):
    counts = split_counts(n, [float(w) for w in weights])
    assert sum(counts) == n
    total = sum(weights)
    for c, w in zip(counts, weights):
        quota = n * w / total
        assert math.floor(quota) <= c <= math.ceil(quota)


def test_split_counts_examples():
    assert split_counts(64, [0.5, 0.25, 0.25]) == [32, 16, 16]
    assert split_counts(10, [1, 1, 1]) == [4, 3, 3]
    with pytest.raises(ValueError):
        split_counts(3, [0, 0])
