"""Exception hierarchy shared across modules."""


class VolumeError(Exception):
    """Block-level failure: bad geometry, out-of-range or misaligned access."""


class GeometryError(VolumeError):
    pass


class OutOfRangeError(VolumeError):
    pass


class MisalignedError(VolumeError):
    pass


class TransportError(VolumeError):
    """Link closed, refused, or the peer spoke an unexpected protocol."""


class ProtocolVersionError(TransportError):
    pass


class SimulatedCrash(Exception):
    """Raised by a crash-injecting volume once its write budget is spent."""


class FsError(Exception):
    pass


class VolumeTooSmallError(FsError):
    pass


class NotFoundError(FsError):
    pass


class DuplicateNameError(FsError):
    pass


class TableFullError(FsError):
    pass


class OutOfSpaceError(FsError):
    pass


class CorruptMetadataError(FsError):
    pass


class LeaseConflictError(FsError):
    """Initiator I/O or a new lease collides with an active lease."""


class LeaseError(FsError):
    """Unknown, completed, or malformed lease."""


class AuthorizationError(FsError):
    """Offloaded I/O touched blocks outside its lease."""


class StaleLeaseError(FsError):
    """Offloaded I/O through a lease that is no longer active."""


class UnknownStubError(Exception):
    pass


class DuplicateStubError(Exception):
    pass


class TaskFailedError(Exception):
    """An offloaded or local task raised; carries the remote message when there is one."""


class CorruptionError(Exception):
    """Checksum failure in a committed part of a log or table."""
