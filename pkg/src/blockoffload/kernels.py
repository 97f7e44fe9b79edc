"""Kernel backend selection.

The compiled extension is used when importable; set ``BLOCKOFFLOAD_PURE=1`` to
force the pure-Python implementation.
"""
import os

if os.environ.get("BLOCKOFFLOAD_PURE"):
    from blockoffload import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from blockoffload import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        from blockoffload import _kernels_py as _impl
        BACKEND = "python"

transform_digest = _impl.transform_digest
decode_entries = _impl.decode_entries

__all__ = ["BACKEND", "transform_digest", "decode_entries"]
