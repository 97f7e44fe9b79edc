"""Miniature LSM key-value store over the extent file system."""
from blockoffload.offloaddb.blockcache import BlockCache
from blockoffload.offloaddb.config import DbConfig
from blockoffload.offloaddb.db import L0Cache, OffloadDB
from blockoffload.offloaddb.manifest import ManifestEdit, SstMeta
from blockoffload.offloaddb.memtable import MemEntry, MemTable

__all__ = ["BlockCache", "DbConfig", "L0Cache", "ManifestEdit", "MemEntry", "MemTable",
           "OffloadDB", "SstMeta"]
