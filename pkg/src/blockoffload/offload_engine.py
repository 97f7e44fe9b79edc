"""Target-side offload engine.

The engine runs registered task stubs against lease-scoped I/O. An admission
policy decides whether a request runs at all; rejected requests never touch a
volume, so the initiator can run the same task locally. Offloaded reads go
through a shared block cache that pins entries for the duration of a task and
bypasses any entry older than the per-file modification hint in the request.
"""
from __future__ import annotations

import os
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

from blockoffload.errors import DuplicateStubError, UnknownStubError
from blockoffload.extentfs import FileExtent, Lease, LeaseContext
from blockoffload.transport import MsgType, error_payload, ErrorCode
from blockoffload.volume import Volume

COMPLETED, REJECTED, FAILED, UNKNOWN_STUB = "completed", "rejected", "failed", "unknown_stub"
_OUTCOME_CODES = {COMPLETED: 0, REJECTED: 1, FAILED: 2, UNKNOWN_STUB: 3}
_OUTCOME_NAMES = {v: k for k, v in _OUTCOME_CODES.items()}
NO_TOKEN = 0xFFFFFFFF

Stub = Callable[[LeaseContext, bytes], bytes]


# -- admission policies --------------------------------------------------------


class AdmissionPolicy:
    name = "base"

    def admit(self, engine: "OffloadEngine", req: "OffloadRequest") -> str | None:
        """Return ``None`` to admit, or a rejection reason."""
        raise NotImplementedError

    @property
    def waits_for_slot(self) -> bool:
        return False


class AcceptAll(AdmissionPolicy):
    name = "accept_all"

    def admit(self, engine, req):
        return None

    @property
    def waits_for_slot(self) -> bool:
        return True


class RejectAll(AdmissionPolicy):
    name = "reject_all"

    def admit(self, engine, req):
        return "policy"


@dataclass
class CpuThreshold(AdmissionPolicy):
    threshold: float = 0.8
    name = "cpu_threshold"

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")

    def admit(self, engine, req):
        return "policy" if engine.utilization() >= self.threshold else None


@dataclass
class TokenPolicy(AdmissionPolicy):
    token_count: int = 4
    ttl: float = 1.0  # seconds
    name = "token"

    def __post_init__(self):
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")
        if self.ttl <= 0:
            raise ValueError("ttl must be > 0")

    def admit(self, engine, req):
        return None if engine.tokens.valid(req.token_id, req.initiator_id) else "policy"


@dataclass
class Token:
    token_id: int
    holder: int | None = None
    expiry: float = 0.0


class TokenScheduler:
    """Circulates ``token_count`` tokens round-robin over the known initiators.

    Tokens are pushed: whenever one is free (never granted, expired or returned)
    it goes to the next initiator in rotation that does not already hold one.
    """

    def __init__(self, token_count: int, ttl: float, clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self.clock = clock
        self.tokens = [Token(i) for i in range(token_count)]
        self.initiators: list[int] = []
        self._rr = 0
        self._lock = threading.Lock()
        self.grants = 0

    def register(self, initiators) -> None:
        with self._lock:
            for i in initiators:
                if i not in self.initiators:
                    self.initiators.append(i)
            self._refill(self.clock())

    def _refill(self, now: float) -> None:
        for tok in self.tokens:
            if tok.holder is not None and tok.expiry <= now:
                tok.holder = None
        if not self.initiators:
            return
        for tok in self.tokens:
            if tok.holder is not None:
                continue
            holding = {t.holder for t in self.tokens if t.holder is not None}
            n = len(self.initiators)
            for step in range(n):
                cand = self.initiators[(self._rr + step) % n]
                if cand not in holding:
                    tok.holder = cand
                    tok.expiry = now + self.ttl
                    self._rr = (self._rr + step + 1) % n
                    self.grants += 1
                    break
            else:
                return

    def holding(self, initiator: int) -> Token | None:
        """The unexpired token held by ``initiator``, if any (registers it on first sight)."""
        with self._lock:
            if initiator not in self.initiators:
                self.initiators.append(initiator)
            now = self.clock()
            self._refill(now)
            for tok in self.tokens:
                if tok.holder == initiator and tok.expiry > now:
                    return Token(tok.token_id, tok.holder, tok.expiry)
            return None

    def valid(self, token_id: int | None, initiator: int) -> bool:
        if token_id is None or token_id == NO_TOKEN:
            return False
        with self._lock:
            now = self.clock()
            self._refill(now)
            if not 0 <= token_id < len(self.tokens):
                return False
            tok = self.tokens[token_id]
            return tok.holder == initiator and tok.expiry > now

    def give_back(self, token_id: int, initiator: int) -> None:
        with self._lock:
            if 0 <= token_id < len(self.tokens) and self.tokens[token_id].holder == initiator:
                self.tokens[token_id].holder = None
                self._refill(self.clock())

    def holders(self) -> list[int]:
        with self._lock:
            now = self.clock()
            self._refill(now)
            return [t.holder for t in self.tokens if t.holder is not None and t.expiry > now]


# -- offload cache ---------------------------------------------------------------


@dataclass
class CacheEntry:
    data: bytes
    pin_count: int = 0
    load_version: int = 0


class OffloadCache:
    """Block cache keyed by ``(volume_id, addr)``; LRU over unpinned entries."""

    def __init__(self, capacity_bytes: int, block_size: int = 4096):
        self.capacity_bytes = capacity_bytes
        self.block_size = block_size
        self._entries: OrderedDict[tuple[int, int], CacheEntry] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.stale_bypasses = 0
        self.evictions = 0

    @property
    def enabled(self) -> bool:
        return self.capacity_bytes >= self.block_size

    @property
    def used_bytes(self) -> int:
        return len(self._entries) * self.block_size

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, key) -> CacheEntry | None:
        return self._entries.get(key)

    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def _make_room(self) -> bool:
        limit = self.capacity_bytes // self.block_size
        while len(self._entries) >= limit:
            victim = next((k for k, e in self._entries.items() if e.pin_count == 0), None)
            if victim is None:
                return False
            del self._entries[victim]
            self.evictions += 1
        return True

    def read(self, volume: Volume, volume_id: int, addr: int, count: int, hint: int,
             pins: set) -> bytes:
        """Serve ``count`` blocks, pinning every cached block once per task (``pins``)."""
        bs = self.block_size
        out: list[bytes | None] = [None] * count
        with self._lock:
            for i in range(count):
                key = (volume_id, addr + i)
                e = self._entries.get(key)
                if e is None:
                    continue
                if e.load_version >= hint:
                    out[i] = e.data
                    self._entries.move_to_end(key)
                    self.hits += 1
                    if key not in pins:
                        e.pin_count += 1
                        pins.add(key)
                else:
                    self.stale_bypasses += 1
        i = 0
        while i < count:
            if out[i] is not None:
                i += 1
                continue
            j = i
            while j < count and out[j] is None:
                j += 1
            data = volume.read_blocks(addr + i, j - i)
            with self._lock:
                for k in range(i, j):
                    blk = data[(k - i) * bs:(k - i + 1) * bs]
                    out[k] = blk
                    self.misses += 1
                    key = (volume_id, addr + k)
                    e = self._entries.get(key)
                    if e is not None:
                        e.data = blk
                        e.load_version = hint
                        self._entries.move_to_end(key)
                    elif self._make_room():
                        e = CacheEntry(blk, 0, hint)
                        self._entries[key] = e
                    else:
                        continue
                    if key not in pins:
                        e.pin_count += 1
                        pins.add(key)
            i = j
        return b"".join(out)

    def unpin(self, pins: set) -> None:
        with self._lock:
            for key in pins:
                e = self._entries.get(key)
                if e is not None and e.pin_count > 0:
                    e.pin_count -= 1
            pins.clear()

    def invalidate(self, volume_id: int, addr: int, count: int, pins: set | None = None) -> None:
        with self._lock:
            for a in range(addr, addr + count):
                key = (volume_id, a)
                if self._entries.pop(key, None) is not None and pins is not None:
                    pins.discard(key)

    def pinned(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries.values() if e.pin_count)


class TargetContext(LeaseContext):
    """Lease-scoped I/O on the engine's node, reads served through the Offload Cache."""

    def __init__(self, volume: Volume, lease: Lease, cache: OffloadCache | None, volume_id: int):
        super().__init__(volume, lease)
        self.cache = cache if cache is not None and cache.enabled else None
        self.volume_id = volume_id
        self.pins: set = set()

    def _read(self, phys, count, hint):
        if self.cache is None:
            return self.volume.read_blocks(phys, count)
        return self.cache.read(self.volume, self.volume_id, phys, count, hint, self.pins)

    def _write(self, phys, data):
        self.volume.write_blocks(phys, data)
        if self.cache is not None:
            self.cache.invalidate(self.volume_id, phys, len(data) // self.block_size, self.pins)

    def close(self):
        super().close()
        if self.cache is None:
            return
        # blocks the task reserved but left unwritten are about to be freed
        for ext, n in zip(self.lease.write_set, self.bytes_written):
            used = -(-n // self.block_size)
            if used < ext.length:
                self.cache.invalidate(self.volume_id, ext.phys_start + used, ext.length - used, self.pins)
        self.cache.unpin(self.pins)


# -- requests and responses ----------------------------------------------------


@dataclass
class OffloadRequest:
    stub_name: str
    lease: Lease
    args: bytes = b""
    mtime_hints: list[tuple[int, int]] | None = None
    initiator_id: int = 0
    token_id: int | None = None

    def __post_init__(self):
        if self.mtime_hints is None:
            self.mtime_hints = list(self.lease.mtime_hints)


@dataclass
class OffloadResponse:
    outcome: str
    result: bytes = b""
    bytes_written: list[int] = field(default_factory=list)
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome == COMPLETED


_EXT_W = struct.Struct("<IQQI")
_SUBMIT_HDR = struct.Struct("<QIIII")


def encode_request(req: OffloadRequest) -> bytes:
    lease = req.lease
    token = NO_TOKEN if req.token_id is None else req.token_id
    parts = [_SUBMIT_HDR.pack(lease.lease_id, req.initiator_id, token,
                              len(lease.read_set), len(lease.write_set))]
    parts += [_EXT_W.pack(*e) for e in lease.read_set]
    parts += [_EXT_W.pack(*e) for e in lease.write_set]
    name = req.stub_name.encode()
    parts.append(struct.pack("<H", len(name)) + name)
    parts.append(struct.pack("<H", len(req.mtime_hints)))
    parts += [struct.pack("<IQ", ino, m) for ino, m in req.mtime_hints]
    parts.append(struct.pack("<I", len(req.args)) + req.args)
    return b"".join(parts)


def decode_request(payload: bytes, volume_id: int = 0) -> OffloadRequest:
    lease_id, initiator, token, nr, nw = _SUBMIT_HDR.unpack_from(payload)
    p = _SUBMIT_HDR.size
    exts = []
    for _ in range(nr + nw):
        exts.append(FileExtent(*_EXT_W.unpack_from(payload, p)))
        p += _EXT_W.size
    (nlen,) = struct.unpack_from("<H", payload, p)
    name = payload[p + 2:p + 2 + nlen].decode()
    p += 2 + nlen
    (nh,) = struct.unpack_from("<H", payload, p)
    p += 2
    hints = []
    for _ in range(nh):
        hints.append(struct.unpack_from("<IQ", payload, p))
        p += 12
    (alen,) = struct.unpack_from("<I", payload, p)
    args = payload[p + 4:p + 4 + alen]
    if len(args) != alen:
        raise ValueError("truncated offload request")
    lease = Lease(lease_id, exts[:nr], exts[nr:], [tuple(h) for h in hints],
                  initiator_id=initiator, volume_id=volume_id)
    return OffloadRequest(name, lease, bytes(args), lease.mtime_hints, initiator,
                          None if token == NO_TOKEN else token)


def encode_response(resp: OffloadResponse) -> bytes:
    # cut at 255 bytes without splitting a character
    reason = resp.reason.encode()[:255].decode(errors="ignore").encode()
    return (bytes([_OUTCOME_CODES[resp.outcome], len(reason)]) + reason
            + struct.pack(f"<H{len(resp.bytes_written)}Q", len(resp.bytes_written), *resp.bytes_written)
            + struct.pack("<I", len(resp.result)) + resp.result)


def decode_response(payload: bytes) -> OffloadResponse:
    outcome, rlen = payload[0], payload[1]
    reason = payload[2:2 + rlen].decode()
    p = 2 + rlen
    (n,) = struct.unpack_from("<H", payload, p)
    written = list(struct.unpack_from(f"<{n}Q", payload, p + 2))
    p += 2 + 8 * n
    (size,) = struct.unpack_from("<I", payload, p)
    return OffloadResponse(_OUTCOME_NAMES[outcome], bytes(payload[p + 4:p + 4 + size]), written, reason)


# -- configuration ---------------------------------------------------------------


@dataclass
class EngineConfig:
    policy: str = "accept_all"
    threshold: float = 0.8
    token_count: int = 4
    token_ttl_ms: int = 1000
    cache_capacity_bytes: int = 64 << 20
    executor_slots: int = 0  # 0 means host parallelism

    @classmethod
    def parse(cls, text: str) -> "EngineConfig":
        cfg = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise ValueError(f"bad engine config line: {raw!r}")
            kind = type(getattr(cfg, key))
            setattr(cfg, key, kind(value))
        return cfg

    @classmethod
    def load(cls, path) -> "EngineConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def make_policy(self) -> AdmissionPolicy:
        if self.policy in ("accept_all", "accept"):
            return AcceptAll()
        if self.policy in ("reject_all", "reject"):
            return RejectAll()
        if self.policy in ("cpu_threshold", "cpu", "threshold"):
            return CpuThreshold(self.threshold)
        if self.policy == "token":
            return TokenPolicy(self.token_count, self.token_ttl_ms / 1000)
        raise ValueError(f"unknown policy {self.policy!r}")


# -- engine ------------------------------------------------------------------------


class OffloadEngine:
    def __init__(self, volumes: list[Volume] | dict[int, Volume] | None = None,
                 policy: AdmissionPolicy | None = None, cache_capacity_bytes: int = 64 << 20,
                 executor_slots: int = 0, clock: Callable[[], float] = time.monotonic,
                 block_size: int = 4096):
        if isinstance(volumes, dict):
            self.volumes = dict(volumes)
        else:
            self.volumes = {v.volume_id: v for v in volumes or ()}
        self.clock = clock
        self.slots = executor_slots or os.cpu_count() or 1
        self._busy = 0
        self._slot_cond = threading.Condition()
        self._stubs: dict[str, Stub] = {}
        self._probe: Callable[[], float] | None = None
        self.cache = OffloadCache(cache_capacity_bytes, block_size)
        self.tokens: TokenScheduler | None = None
        self.counts = {COMPLETED: 0, REJECTED: 0, FAILED: 0, UNKNOWN_STUB: 0}
        self.decisions: list[tuple[float, bool]] = []
        self.record_decisions = False
        self.set_policy(policy or AcceptAll())

    @classmethod
    def from_config(cls, cfg: EngineConfig, volumes=None, clock=time.monotonic) -> "OffloadEngine":
        return cls(volumes, cfg.make_policy(), cfg.cache_capacity_bytes, cfg.executor_slots, clock)

    def set_policy(self, policy: AdmissionPolicy) -> None:
        self.policy = policy
        if isinstance(policy, TokenPolicy):
            self.tokens = TokenScheduler(policy.token_count, policy.ttl, self.clock)

    def add_volume(self, volume: Volume) -> None:
        self.volumes[volume.volume_id] = volume

    def register_stub(self, name: str, stub: Stub) -> None:
        if name in self._stubs:
            raise DuplicateStubError(name)
        self._stubs[name] = stub

    def has_stub(self, name: str) -> bool:
        return name in self._stubs

    def set_utilization_probe(self, source: Callable[[], float] | None) -> None:
        self._probe = source

    def utilization(self) -> float:
        if self._probe is not None:
            return self._probe()
        return self._busy / self.slots

    def token_service(self, initiators) -> TokenScheduler:
        if self.tokens is None:
            raise ValueError("token service needs the token policy")
        self.tokens.register(initiators)
        return self.tokens

    def _admit(self, req: OffloadRequest) -> str | None:
        with self._slot_cond:
            probe = self.utilization() if self.record_decisions else None
            reason = self.policy.admit(self, req)
            if self.record_decisions:
                self.decisions.append((probe, reason is None))
            if reason is not None:
                return reason
            if self._busy < self.slots:
                self._busy += 1
                return None
            if not self.policy.waits_for_slot:
                return "overload"
            while self._busy >= self.slots:
                self._slot_cond.wait()
            self._busy += 1
            return None

    def _release_slot(self) -> None:
        with self._slot_cond:
            self._busy -= 1
            self._slot_cond.notify()

    def submit(self, req: OffloadRequest, volume_id: int | None = None) -> OffloadResponse:
        stub = self._stubs.get(req.stub_name)
        if stub is None:
            self.counts[UNKNOWN_STUB] += 1
            return OffloadResponse(UNKNOWN_STUB, reason=f"unknown stub {req.stub_name!r}")
        vid = req.lease.volume_id if volume_id is None else volume_id
        volume = self.volumes.get(vid)
        if volume is None:
            self.counts[FAILED] += 1
            return OffloadResponse(FAILED, reason=f"volume {vid} not attached")
        reason = self._admit(req)
        if reason is not None:
            self.counts[REJECTED] += 1
            return OffloadResponse(REJECTED, reason=reason)
        req.lease.mtime_hints = list(req.mtime_hints)
        ctx = TargetContext(volume, req.lease, self.cache, vid)
        try:
            result = stub(ctx, req.args)
        except Exception as exc:  # the stub's failure becomes the response
            ctx.close()
            self.counts[FAILED] += 1
            return OffloadResponse(FAILED, reason=f"{type(exc).__name__}: {exc}",
                                   bytes_written=[0] * len(req.lease.write_set))
        finally:
            self._release_slot()
        ctx.close()
        self.counts[COMPLETED] += 1
        return OffloadResponse(COMPLETED, bytes(result or b""), ctx.bytes_written)

    # -- wire ------------------------------------------------------------------

    def handle_wire(self, msg: int, payload: bytes, volume_id: int | None) -> tuple[int, bytes]:
        if msg == MsgType.OFFLOAD_SUBMIT:
            req = decode_request(payload, volume_id or 0)
            return MsgType.OFFLOAD_RESULT, encode_response(self.submit(req, volume_id))
        if msg == MsgType.TOKEN_REQUEST:
            (initiator,) = struct.unpack("<I", payload)
            if self.tokens is None:
                return MsgType.TOKEN_GRANT, struct.pack("<II", NO_TOKEN, 0)
            tok = self.tokens.holding(initiator)
            if tok is None:
                return MsgType.TOKEN_GRANT, struct.pack("<II", NO_TOKEN, 0)
            left_ms = max(0, int((tok.expiry - self.clock()) * 1000))
            return MsgType.TOKEN_GRANT, struct.pack("<II", tok.token_id, left_ms)
        if msg == MsgType.TOKEN_RETURN:
            token_id, initiator = struct.unpack("<II", payload)
            if self.tokens is not None:
                self.tokens.give_back(token_id, initiator)
            return MsgType.TOKEN_RETURN, b""
        return MsgType.ERROR, error_payload(ErrorCode.BAD_REQUEST, f"unsupported message {msg}")


def raise_unknown_stub(resp: OffloadResponse) -> None:
    if resp.outcome == UNKNOWN_STUB:
        raise UnknownStubError(resp.reason)
