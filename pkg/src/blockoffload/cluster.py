"""In-process wiring of a target node, an optional peer node and initiators.

The target serves one volume per initiator plus an offload engine. The peer
runs its own engine whose volumes are remote handles onto the target, so work
sent to the peer reads and writes blocks over its own metered link.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from blockoffload.extentfs import ExtentFS
from blockoffload.offload_engine import AcceptAll, AdmissionPolicy, OffloadEngine
from blockoffload.task_offloader import EngineClient, TaskOffloader
from blockoffload.transport import LinkProfile, NodeService, RemoteVolume, TcpServer, connect, serve
from blockoffload.volume import MemoryVolume, Volume, VolumeGeometry


def register_all_stubs(engine: OffloadEngine) -> None:
    from blockoffload.offloaddb.stubs import LOG_RECYCLE, MERGE, log_recycle_stub, merge_stub
    from blockoffload.offloadprep import TRANSFORM_STUB, transform_stub

    for name, fn in ((LOG_RECYCLE, log_recycle_stub), (MERGE, merge_stub), (TRANSFORM_STUB, transform_stub)):
        if not engine.has_stub(name):
            engine.register_stub(name, fn)


@dataclass
class Initiator:
    initiator_id: int
    volume: RemoteVolume
    fs: ExtentFS
    offloader: TaskOffloader
    profile: LinkProfile
    peer_profile: LinkProfile | None = None


@dataclass
class Cluster:
    engine: OffloadEngine
    service: NodeService
    peer_engine: OffloadEngine | None = None
    peer_service: NodeService | None = None
    peer_profile: LinkProfile = field(default_factory=LinkProfile)
    initiators: list[Initiator] = field(default_factory=list)
    latency_us: float = 0.0
    servers: list[TcpServer] = field(default_factory=list)
    endpoint: object = None
    peer_endpoint: object = None

    @classmethod
    def build(cls, policy: AdmissionPolicy | None = None, cache_capacity_bytes: int = 64 << 20,
              executor_slots: int = 4, peer: bool = True, clock=None) -> "Cluster":
        kw = {} if clock is None else {"clock": clock}
        engine = OffloadEngine(policy=policy or AcceptAll(), cache_capacity_bytes=cache_capacity_bytes,
                               executor_slots=executor_slots, **kw)
        register_all_stubs(engine)
        service = NodeService(engine=engine)
        c = cls(engine, service)
        if peer:
            c.peer_engine = OffloadEngine(policy=AcceptAll(), cache_capacity_bytes=0,
                                          executor_slots=executor_slots)
            register_all_stubs(c.peer_engine)
            c.peer_service = NodeService(engine=c.peer_engine)
        return c

    def serve_tcp(self) -> None:
        """Expose target and peer on loopback sockets; later attachments connect through them."""
        srv = serve(self.service)
        self.servers.append(srv)
        self.endpoint = srv.server_address
        if self.peer_service is not None:
            psrv = serve(self.peer_service)
            self.servers.append(psrv)
            self.peer_endpoint = psrv.server_address

    def close(self) -> None:
        for srv in self.servers:
            srv.shutdown()
            srv.server_close()
        self.servers.clear()

    def _profile(self) -> LinkProfile:
        return LinkProfile(one_way_latency=self.latency_us)

    def add_volume(self, geometry: VolumeGeometry, volume: Volume | None = None) -> Volume:
        vol = volume if volume is not None else MemoryVolume(geometry)
        self.service.add_volume(vol)
        self.engine.add_volume(vol)
        if self.peer_engine is not None:
            # the peer reaches the same blocks through its own link to the target
            self.peer_engine.add_volume(RemoteVolume(connect(self.service, self.peer_profile), vol.volume_id))
        return vol

    def attach(self, volume: Volume, initiator_id: int | None = None, profile: LinkProfile | None = None,
               fresh: bool = True, block_cache=None) -> Initiator:
        """Mount ``volume`` on a new initiator reached through a metered link."""
        profile = profile or self._profile()
        link = connect(self.endpoint or self.service, profile)
        remote = RemoteVolume(link, volume.volume_id)
        fs = ExtentFS.mkfs(remote) if fresh else ExtentFS.mount(remote)
        iid = len(self.initiators) if initiator_id is None else initiator_id
        peers, peer_profile = {}, None
        if self.peer_service is not None:
            peer_profile = self._profile()
            peer_link = connect(self.peer_endpoint or self.peer_service, peer_profile)
            RemoteVolume(peer_link, volume.volume_id)  # HELLO binds the peer session to this volume
            peers[0] = EngineClient(peer_link)
        off = TaskOffloader(fs, EngineClient(link), peers, initiator_id=iid, block_cache=block_cache)
        init = Initiator(iid, remote, fs, off, profile, peer_profile)
        self.initiators.append(init)
        return init

    def new_initiator(self, block_count: int = 16384, block_size: int = 4096, **kw) -> Initiator:
        vol = self.add_volume(VolumeGeometry(block_size, block_count))
        return self.attach(vol, **kw)
