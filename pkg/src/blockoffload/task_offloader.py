"""Initiator-side task dispatch.

A task is a stub name plus the extents it reads and writes. The offloader
grants a lease for those extents, ships the request to the chosen site and
completes the lease with the byte counts the site reports. If the site rejects
(or the task fails there) the same stub runs locally against the initiator's
own view of the volume, so the caller always gets a result.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Callable

from blockoffload.errors import TaskFailedError, TransportError, UnknownStubError
from blockoffload.extentfs import ExtentFS, FileExtent, LocalContext
from blockoffload.offload_engine import (
    COMPLETED,
    NO_TOKEN,
    UNKNOWN_STUB,
    OffloadEngine,
    OffloadRequest,
    OffloadResponse,
    Stub,
    decode_response,
    encode_request,
)
from blockoffload.transport import Link, MsgType, raise_for_error, traffic

LOCAL, TARGET, PEER = "local", "target", "peer"


@dataclass(frozen=True)
class SitePlan:
    site: str = TARGET
    peer_id: int = 0
    target_fraction: float = 1.0

    def __post_init__(self):
        if self.site not in (LOCAL, TARGET, PEER, "split"):
            raise ValueError(f"unknown site {self.site!r}")
        if not 0 <= self.target_fraction <= 1:
            raise ValueError("target_fraction must be within [0, 1]")

    @classmethod
    def local(cls) -> "SitePlan":
        return cls(LOCAL)

    @classmethod
    def target(cls) -> "SitePlan":
        return cls(TARGET)

    @classmethod
    def peer(cls, peer_id: int = 0) -> "SitePlan":
        return cls(PEER, peer_id=peer_id)

    @classmethod
    def split(cls, target_fraction: float, peer_id: int = 0) -> "SitePlan":
        return cls("split", peer_id=peer_id, target_fraction=target_fraction)


@dataclass
class TaskSpec:
    stub_name: str
    read_extents: list[FileExtent] = field(default_factory=list)
    write_extents: list[FileExtent] = field(default_factory=list)
    args: bytes = b""
    local_fallback: Stub | None = None
    category: str = "offload"


class EngineClient:
    """Talks to a remote engine over a link already bound to a volume."""

    def __init__(self, link: Link):
        self.link = link

    @property
    def profile(self):
        return self.link.profile

    def submit(self, req: OffloadRequest) -> OffloadResponse:
        msg, payload = self.link.request(MsgType.OFFLOAD_SUBMIT, encode_request(req))
        if msg == MsgType.ERROR:
            raise_for_error(payload)
        if msg != MsgType.OFFLOAD_RESULT:
            raise TransportError(f"unexpected reply {msg} to OFFLOAD_SUBMIT")
        return decode_response(payload)

    def request_token(self, initiator_id: int) -> tuple[int | None, int]:
        msg, payload = self.link.request(MsgType.TOKEN_REQUEST, struct.pack("<I", initiator_id))
        if msg == MsgType.ERROR:
            raise_for_error(payload)
        token_id, ttl_ms = struct.unpack("<II", payload)
        return (None if token_id == NO_TOKEN else token_id), ttl_ms

    def return_token(self, token_id: int, initiator_id: int) -> None:
        self.link.request(MsgType.TOKEN_RETURN, struct.pack("<II", token_id, initiator_id))


class DirectClient:
    """In-process engine client without a link; useful for unit tests."""

    def __init__(self, engine: OffloadEngine):
        self.engine = engine

    def submit(self, req: OffloadRequest) -> OffloadResponse:
        return self.engine.submit(req)

    def request_token(self, initiator_id: int) -> tuple[int | None, int]:
        tok = self.engine.tokens.holding(initiator_id) if self.engine.tokens else None
        if tok is None:
            return None, 0
        return tok.token_id, int((tok.expiry - self.engine.clock()) * 1000)

    def return_token(self, token_id: int, initiator_id: int) -> None:
        if self.engine.tokens:
            self.engine.tokens.give_back(token_id, initiator_id)


class TokenSession:
    """Client-side view of a token grant; refreshed lazily when it expires."""

    def __init__(self, client, initiator_id: int, clock: Callable[[], float] = time.monotonic):
        self.client = client
        self.initiator_id = initiator_id
        self.clock = clock
        self.token_id: int | None = None
        self.expiry = 0.0
        self.requests = 0

    def valid(self) -> bool:
        return self.token_id is not None and self.clock() < self.expiry

    def acquire(self) -> bool:
        self.requests += 1
        token_id, ttl_ms = self.client.request_token(self.initiator_id)
        self.token_id = token_id
        self.expiry = self.clock() + ttl_ms / 1000 if token_id is not None else 0.0
        return token_id is not None

    def ensure(self) -> bool:
        return self.valid() or self.acquire()

    def release(self) -> None:
        if self.token_id is not None:
            self.client.return_token(self.token_id, self.initiator_id)
            self.token_id = None


class TaskOffloader:
    def __init__(self, fs: ExtentFS, target=None, peers: dict | None = None, initiator_id: int = 0,
                 stubs: dict[str, Stub] | None = None, block_cache=None):
        self.fs = fs
        self.target = target
        self.peers = dict(peers or {})
        self.initiator_id = initiator_id
        self.stubs = dict(stubs or {})
        self.block_cache = block_cache
        self.token_session: TokenSession | None = None
        self.site_counts = {LOCAL: 0, TARGET: 0, PEER: 0}
        self.rejections = 0
        self.failures = 0

    def register_stub(self, name: str, stub: Stub) -> None:
        self.stubs[name] = stub

    def hold_token(self, clock: Callable[[], float] = time.monotonic) -> TokenSession:
        if self.target is None:
            raise ValueError("no target engine to hold a token from")
        self.token_session = TokenSession(self.target, self.initiator_id, clock)
        self.token_session.acquire()
        return self.token_session

    def _client(self, plan: SitePlan):
        if plan.site == TARGET:
            return self.target
        if plan.site == PEER:
            return self.peers.get(plan.peer_id)
        return None

    def run(self, task: TaskSpec, plan: SitePlan = SitePlan()) -> tuple[bytes, str]:
        if plan.site == "split":
            plan = SitePlan.target() if plan.target_fraction >= 0.5 else SitePlan.peer(plan.peer_id)
        lease = self.fs.grant_lease(task.read_extents, task.write_extents, initiator_id=self.initiator_id)
        try:
            client = self._client(plan)
            token_id = None
            if client is not None and plan.site == TARGET and self.token_session is not None:
                if self.token_session.ensure():
                    token_id = self.token_session.token_id
                else:
                    client = None
            if client is not None:
                req = OffloadRequest(task.stub_name, lease, task.args, initiator_id=self.initiator_id,
                                     token_id=token_id)
                with traffic(task.category):
                    resp = client.submit(req)
                if resp.outcome == UNKNOWN_STUB:
                    raise UnknownStubError(resp.reason)
                if resp.outcome == COMPLETED:
                    self._forget(self.fs.complete_lease(lease.lease_id, resp.bytes_written))
                    self.site_counts[plan.site] += 1
                    return resp.result, plan.site
                if resp.outcome == "rejected":
                    self.rejections += 1
                else:
                    self.failures += 1
            result, written = self._run_local(task, lease)
        except BaseException:
            if lease.state == "active":
                self._forget(self.fs.abort_lease(lease.lease_id))
            raise
        self._forget(self.fs.complete_lease(lease.lease_id, written))
        self.site_counts[LOCAL] += 1
        return result, LOCAL

    def _forget(self, freed) -> None:
        if self.block_cache is not None and freed:
            self.block_cache.invalidate_runs(freed)

    def _run_local(self, task: TaskSpec, lease) -> tuple[bytes, list[int]]:
        fn = task.local_fallback or self.stubs.get(task.stub_name)
        if fn is None:
            raise UnknownStubError(f"no local implementation of {task.stub_name!r}")
        ctx = LocalContext(self.fs.volume, lease, self.block_cache)
        try:
            with traffic(task.category + "_local"):
                result = fn(ctx, task.args)
        except Exception as exc:
            raise TaskFailedError(f"{task.stub_name}: {type(exc).__name__}: {exc}") from exc
        finally:
            ctx.close()
        return bytes(result or b""), ctx.bytes_written

    def run_batch(self, tasks: list[TaskSpec], plan: SitePlan = SitePlan()) -> list[tuple[bytes, str]]:
        """Run tasks one by one; a split plan sends the first share to the target, the rest to the peer."""
        if plan.site != "split":
            return [self.run(t, plan) for t in tasks]
        n_target = split_counts(len(tasks), [plan.target_fraction, 1 - plan.target_fraction])[0]
        out = []
        for i, t in enumerate(tasks):
            out.append(self.run(t, SitePlan.target() if i < n_target else SitePlan.peer(plan.peer_id)))
        return out


def split_counts(n: int, fractions: list[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``fractions`` (ties go to earlier sites)."""
    total = sum(fractions)
    if total <= 0 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative with a positive sum")
    quotas = [n * f / total for f in fractions]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts
