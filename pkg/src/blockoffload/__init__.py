"""Initiator-centric file system over disaggregated block storage.

Subpackages and modules:

volume          block volumes (memory, file, remote) and crash-injection wrappers
transport       framed wire protocol, metered links, target/peer node service
extentfs        inode table, extent trees, free space, leases, lease-scoped target I/O
offload_engine  target-side stub execution, admission policies, Offload Cache
task_offloader  initiator-side dispatch with local fallback and site selection
offloaddb       LSM key-value store that offloads flush and compaction
offloadprep     read-only preprocessing offloader
bench           workload generators, experiments and the ``bench`` CLI
"""
from blockoffload.errors import (
    AuthorizationError,
    DuplicateNameError,
    FsError,
    LeaseConflictError,
    OutOfSpaceError,
    StaleLeaseError,
    VolumeError,
)

__version__ = "0.1.0"

__all__ = [
    "AuthorizationError",
    "DuplicateNameError",
    "FsError",
    "LeaseConflictError",
    "OutOfSpaceError",
    "StaleLeaseError",
    "VolumeError",
]
