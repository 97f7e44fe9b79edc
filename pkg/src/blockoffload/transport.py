"""Framed wire protocol and metered links.

Every message is ``[u32 length][u8 msg_type][payload]`` with ``length`` counting
the type byte plus the payload; all integers are little-endian. A link carries
request/response pairs and meters the exact framed bytes in each direction.
Two link kinds share one code path: :class:`LocalLink` hands frames to an
in-process :class:`Session`, :class:`SocketLink` ships them over TCP.
"""
from __future__ import annotations

import contextlib
import socket
import socketserver
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from blockoffload.errors import (
    MisalignedError,
    OutOfRangeError,
    ProtocolVersionError,
    TransportError,
    VolumeError,
)
from blockoffload.volume import Volume, VolumeGeometry

PROTOCOL_VERSION = 1

_HDR = struct.Struct("<IB")
_IO_READ = struct.Struct("<QI")
_HELLO = struct.Struct("<HI")
_HELLO_RESP = struct.Struct("<HIQ")


class MsgType(IntEnum):
    HELLO = 0
    IO_READ = 1
    IO_WRITE = 2
    IO_READ_RESP = 3
    IO_WRITE_ACK = 4
    ERROR = 5
    HELLO_RESP = 6
    OFFLOAD_SUBMIT = 10
    OFFLOAD_RESULT = 11
    TOKEN_GRANT = 12
    TOKEN_RETURN = 13
    TOKEN_REQUEST = 14


class ErrorCode(IntEnum):
    OUT_OF_RANGE = 1
    MISALIGNED = 2
    VERSION = 3
    UNKNOWN_VOLUME = 4
    BAD_REQUEST = 5


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    return _HDR.pack(len(payload) + 1, msg_type) + payload


def decode_frame(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < 5:
        raise TransportError("short frame")
    length, msg_type = _HDR.unpack_from(frame)
    if length != len(frame) - 4:
        raise TransportError(f"frame length {length} does not match {len(frame) - 4}")
    return msg_type, frame[5:]


def frame_size(payload_len: int) -> int:
    return 5 + payload_len


def error_payload(code: int, message: str) -> bytes:
    return bytes([code]) + message.encode()


def raise_for_error(payload: bytes) -> None:
    code, message = payload[0], payload[1:].decode(errors="replace")
    if code == ErrorCode.OUT_OF_RANGE:
        raise OutOfRangeError(message)
    if code == ErrorCode.MISALIGNED:
        raise MisalignedError(message)
    if code == ErrorCode.VERSION:
        raise ProtocolVersionError(message)
    raise TransportError(message)


# -- traffic categories ------------------------------------------------------

_category = threading.local()


@contextlib.contextmanager
def traffic(category: str):
    """Attribute link bytes sent by this thread inside the block to ``category``."""
    prev = getattr(_category, "name", None)
    _category.name = category
    try:
        yield
    finally:
        _category.name = prev


def current_category() -> str:
    return getattr(_category, "name", None) or "other"


@dataclass
class LinkProfile:
    """Latency/bandwidth model plus monotonic byte and message counters."""

    one_way_latency: float = 0.0  # microseconds
    bandwidth: float = 0.0  # bytes/second; 0 means unpaced
    tx_bytes: int = 0
    rx_bytes: int = 0
    round_trips: int = 0
    by_category: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0, 0]))
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, tx: int, rx: int, category: str) -> None:
        with self._lock:
            self.tx_bytes += tx
            self.rx_bytes += rx
            self.round_trips += 1
            slot = self.by_category[category]
            slot[0] += tx
            slot[1] += rx
            slot[2] += 1

    def delay(self, nbytes: int) -> None:
        seconds = 2 * self.one_way_latency / 1e6
        if self.bandwidth:
            seconds += nbytes / self.bandwidth
        if seconds > 0:
            self.sleep(seconds)

    def category_tx(self, *names: str) -> int:
        with self._lock:
            return sum(self.by_category[n][0] for n in names if n in self.by_category)

    def category_rx(self, *names: str) -> int:
        with self._lock:
            return sum(self.by_category[n][1] for n in names if n in self.by_category)

    def category_round_trips(self, *names: str) -> int:
        with self._lock:
            return sum(self.by_category[n][2] for n in names if n in self.by_category)


class Link:
    """Request/response channel; subclasses move frames, this class meters them."""

    def __init__(self, profile: LinkProfile | None = None):
        self.profile = profile if profile is not None else LinkProfile()
        self.closed = False

    def request(self, msg_type: int, payload: bytes = b"") -> tuple[int, bytes]:
        if self.closed:
            raise TransportError("link closed")
        frame = encode_frame(msg_type, payload)
        reply = self._exchange(frame)
        self.profile.record(len(frame), len(reply), current_category())
        self.profile.delay(len(frame) + len(reply))
        return decode_frame(reply)

    def _exchange(self, frame: bytes) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True


class LocalLink(Link):
    """In-process link to a :class:`Session`; frames are still fully encoded."""

    def __init__(self, session: "Session", profile: LinkProfile | None = None):
        super().__init__(profile)
        self.session = session

    def _exchange(self, frame):
        return self.session.handle_frame(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    return head + _recv_exact(sock, length)


class SocketLink(Link):
    def __init__(self, address: tuple[str, int], profile: LinkProfile | None = None,
                 timeout: float | None = 30.0):
        super().__init__(profile)
        try:
            self.sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def _exchange(self, frame):
        with self._lock:
            try:
                self.sock.sendall(frame)
                return read_frame(self.sock)
            except OSError as exc:
                self.closed = True
                raise TransportError(str(exc)) from exc

    def close(self):
        super().close()
        with contextlib.suppress(OSError):
            self.sock.close()


# -- remote volume -----------------------------------------------------------


class RemoteVolume(Volume):
    """Volume whose blocks live behind a link; same semantics as a local volume."""

    def __init__(self, link: Link, volume_id: int = 0, version: int = PROTOCOL_VERSION):
        msg, payload = link.request(MsgType.HELLO, _HELLO.pack(version, volume_id))
        if msg == MsgType.ERROR:
            raise_for_error(payload)
        if msg != MsgType.HELLO_RESP:
            raise TransportError(f"unexpected reply {msg} to HELLO")
        _, block_size, block_count = _HELLO_RESP.unpack(payload)
        super().__init__(VolumeGeometry(block_size, block_count), volume_id)
        self.link = link

    @property
    def profile(self) -> LinkProfile:
        return self.link.profile

    def _read(self, addr, count):
        msg, payload = self.link.request(MsgType.IO_READ, _IO_READ.pack(addr, count))
        if msg == MsgType.ERROR:
            raise_for_error(payload)
        if msg != MsgType.IO_READ_RESP or len(payload) != count * self.block_size:
            raise TransportError("malformed read response")
        return payload

    def _write(self, addr, data):
        count = len(data) // self.block_size
        msg, payload = self.link.request(MsgType.IO_WRITE, _IO_READ.pack(addr, count) + data)
        if msg == MsgType.ERROR:
            raise_for_error(payload)
        if msg != MsgType.IO_WRITE_ACK:
            raise TransportError("malformed write ack")

    def close(self):
        self.link.close()


# -- node service ------------------------------------------------------------


class NodeService:
    """Server side of a target or peer node: block I/O plus optional offload engine."""

    def __init__(self, volumes: dict[int, Volume] | None = None, engine=None):
        self.volumes: dict[int, Volume] = dict(volumes or {})
        self.engine = engine

    def add_volume(self, volume: Volume) -> None:
        self.volumes[volume.volume_id] = volume

    def geometry_of(self, volume_id: int) -> VolumeGeometry | None:
        vol = self.volumes.get(volume_id)
        if vol is None and self.engine is not None:
            vol = self.engine.volumes.get(volume_id)
        return vol.geometry if vol is not None else None

    def open_session(self) -> "Session":
        return Session(self)


class Session:
    """Per-connection state; HELLO binds the connection to one volume."""

    def __init__(self, service: NodeService):
        self.service = service
        self.volume_id: int | None = None

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            msg, payload = decode_frame(frame)
        except TransportError as exc:
            return encode_frame(MsgType.ERROR, error_payload(ErrorCode.BAD_REQUEST, str(exc)))
        try:
            rmsg, rpayload = self.dispatch(msg, payload)
        except OutOfRangeError as exc:
            rmsg, rpayload = MsgType.ERROR, error_payload(ErrorCode.OUT_OF_RANGE, str(exc))
        except MisalignedError as exc:
            rmsg, rpayload = MsgType.ERROR, error_payload(ErrorCode.MISALIGNED, str(exc))
        except (VolumeError, ValueError, struct.error) as exc:
            rmsg, rpayload = MsgType.ERROR, error_payload(ErrorCode.BAD_REQUEST, str(exc))
        return encode_frame(rmsg, rpayload)

    def _volume(self) -> Volume:
        vol = self.service.volumes.get(self.volume_id)
        if vol is None:
            raise VolumeError(f"volume {self.volume_id} not served here")
        return vol

    def dispatch(self, msg: int, payload: bytes) -> tuple[int, bytes]:
        if msg == MsgType.HELLO:
            version, volume_id = _HELLO.unpack(payload)
            if version != PROTOCOL_VERSION:
                return MsgType.ERROR, error_payload(
                    ErrorCode.VERSION, f"protocol {version} unsupported (want {PROTOCOL_VERSION})")
            geometry = self.service.geometry_of(volume_id)
            if geometry is None:
                return MsgType.ERROR, error_payload(ErrorCode.UNKNOWN_VOLUME, f"no volume {volume_id}")
            self.volume_id = volume_id
            return MsgType.HELLO_RESP, _HELLO_RESP.pack(
                PROTOCOL_VERSION, geometry.block_size, geometry.block_count)
        if msg == MsgType.IO_READ:
            addr, count = _IO_READ.unpack(payload)
            return MsgType.IO_READ_RESP, self._volume().read_blocks(addr, count)
        if msg == MsgType.IO_WRITE:
            addr, count = _IO_READ.unpack_from(payload)
            data = payload[_IO_READ.size:]
            vol = self._volume()
            if len(data) != count * vol.block_size:
                raise MisalignedError("write payload does not match block count")
            vol.write_blocks(addr, data)
            return MsgType.IO_WRITE_ACK, b""
        engine = self.service.engine
        if engine is not None and msg in (MsgType.OFFLOAD_SUBMIT, MsgType.TOKEN_REQUEST,
                                          MsgType.TOKEN_RETURN):
            return engine.handle_wire(msg, payload, self.volume_id)
        return MsgType.ERROR, error_payload(ErrorCode.BAD_REQUEST, f"unsupported message {msg}")


def attach_remote(endpoint, profile: LinkProfile | None = None, volume_id: int = 0) -> RemoteVolume:
    """Open a remote volume. ``endpoint`` is a :class:`NodeService` or ``(host, port)``/``"host:port"``."""
    return RemoteVolume(connect(endpoint, profile), volume_id)


def connect(endpoint, profile: LinkProfile | None = None) -> Link:
    if isinstance(endpoint, NodeService):
        return LocalLink(endpoint.open_session(), profile)
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        endpoint = (host or "127.0.0.1", int(port))
    return SocketLink(tuple(endpoint), profile)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = self.server.service.open_session()
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = read_frame(sock)
            except (TransportError, OSError):
                return
            sock.sendall(session.handle_frame(frame))


class TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, service: NodeService):
        self.service = service
        super().__init__(address, _Handler)


def serve(service: NodeService, host: str = "127.0.0.1", port: int = 0,
          background: bool = True) -> TcpServer:
    """Start a TCP server for ``service``; ``port=0`` picks a free port."""
    server = TcpServer((host, port), service)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server
